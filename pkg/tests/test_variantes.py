"""
Tests des variantes d'ablation, des apparieurs et du cache de MatchSet.
"""

import logging

import numpy as np
import pytest
import torch

from ombrenet.cache_appariements import CacheAppariements, empreinte_image
from ombrenet.canet import BackboneConfig, UNetConfig
from ombrenet.cft import CftConfig
from ombrenet.cpm import Correspondance, CpmNet, MatchSet
from ombrenet.datasets import PatchRef, patch_shadow_fraction
from ombrenet.erreurs import ErreurConfiguration
from ombrenet.fixtures import damier_ombre, echantillons_fixtures
from ombrenet.imaging import EspaceCouleur, ImagePlane
from ombrenet.variantes import (
    AblationVariant, AppariementExterne, AppariementTm, MatchConfig,
    correlation_normalisee, make_variant,
)

BACKBONE = BackboneConfig(largeurs=(8, 16, 16), croissance=4, couches_dense=1)
UNET = UNetConfig(largeurs=(8, 16), croissance=4, couches_dense=1)


def _variante(nom, cft=None, **kwargs):
    torch.manual_seed(0)
    return make_variant(nom, BACKBONE, UNET, cft, cpm=CpmNet(), **kwargs)


def _matchset():
    return MatchSet({PatchRef(0, 16, 16): [Correspondance(PatchRef(0, 0, 32), 0.9),
                                           Correspondance(PatchRef(0, 32, 0), 0.6)],
                     PatchRef(0, 32, 16): [Correspondance(PatchRef(0, 0, 0), 0.8)]})


class TestVariantes:
    """Les six variantes produisent une image RGB valide."""

    @pytest.mark.parametrize("nom", [v.value for v in AblationVariant])
    def test_sortie_rgb(self, nom):
        img = echantillons_fixtures()[4].ombre
        sortie = _variante(nom).supprimer(img)
        assert sortie.espace == EspaceCouleur.RGB
        assert sortie.data.shape == img.data.shape
        assert sortie.data.min() >= 0.0 and sortie.data.max() <= 1.0

    def test_variante_inconnue(self):
        with pytest.raises(ErreurConfiguration):
            AblationVariant.depuis("sans_tout")

    @pytest.mark.parametrize("nom", ["full", "direct_replace_cft"])
    def test_cpm_requis(self, nom):
        with pytest.raises(ErreurConfiguration):
            make_variant(nom, BACKBONE, UNET)

    def test_remplacement_direct_egal_full_n1_k1(self):
        img = echantillons_fixtures()[0].ombre
        full = _variante("full", CftConfig(k=1, n=1))
        drcf = _variante("direct_replace_cft", CftConfig(k=3, n=5))
        assert drcf.reseau.stage_un.cft == CftConfig(k=1, n=1)
        drcf.reseau.load_state_dict(full.reseau.state_dict())
        ms = _matchset()
        assert np.array_equal(full.supprimer(img, ms).data, drcf.supprimer(img, ms).data)

    def test_sans_cft_ignore_le_matchset(self):
        img = echantillons_fixtures()[1].ombre
        p = _variante("no_cft")
        assert p.apparieur is None
        assert np.array_equal(p.supprimer(img, _matchset()).data, p.supprimer(img, MatchSet()).data)

    def test_full_sensible_au_matchset(self):
        img = echantillons_fixtures()[1].ombre
        p = _variante("full")
        assert not np.array_equal(p.supprimer(img, _matchset()).data, p.supprimer(img, MatchSet()).data)

    def test_dense_unet_seul(self):
        p = _variante("dense_unet_only")
        assert not p.reseau.etape_un
        assert p.matchset(echantillons_fixtures()[0].ombre).est_vide


class TestAppariementTm:
    """Correlation croisee normalisee sur la luminance sans ombre apparente."""

    def test_correlation(self):
        a = np.arange(16, dtype=float).reshape(4, 4)
        assert correlation_normalisee(a, 2 * a + 1) == pytest.approx(1.0)
        assert correlation_normalisee(a, -a) == pytest.approx(-1.0)
        assert correlation_normalisee(a, np.ones((4, 4))) == 0.0

    def test_damier(self):
        e = damier_ombre()
        ms = AppariementTm(MatchConfig(k_candidates=4, score_floor=0.0))(e.ombre)
        assert len(ms) > 0
        for q, corr in ms.requetes.items():
            assert patch_shadow_fraction(q, e.masque) >= 0.5
            assert len(corr) <= 4
            scores = [c.score for c in corr]
            assert scores == sorted(scores, reverse=True)
            assert all(0.0 <= s <= 1.0 for s in scores)
            assert all(patch_shadow_fraction(c.source, e.masque) < 0.5 for c in corr)

    def test_image_uniforme(self):
        assert AppariementTm()(ImagePlane(np.full((64, 64, 3), 0.4))).est_vide


class TestAppariementExterne:

    def test_vide_et_averti_une_fois(self, caplog):
        img = echantillons_fixtures()[0].ombre
        apparieur = AppariementExterne()
        with caplog.at_level(logging.WARNING, logger="ombrenet.variantes"):
            assert apparieur(img).est_vide
            assert apparieur(img).est_vide
        assert len([r for r in caplog.records if "externe" in r.getMessage()]) == 1

    def test_fonction_branchee(self):
        p = make_variant("mnet_match_stub", BACKBONE, UNET, apparieur_externe=lambda img: _matchset())
        assert p.matchset(echantillons_fixtures()[0].ombre) == _matchset()


class TestCache:
    """Cache SQLite des MatchSet."""

    def test_succes_apres_premier_calcul(self):
        img = echantillons_fixtures()[2].ombre
        appels = []

        def calcul(x):
            appels.append(1)
            return _matchset()

        cache = CacheAppariements()
        a = cache.obtenir(img, "cpm-a", MatchConfig(), calcul)
        b = cache.obtenir(img, "cpm-a", MatchConfig(), calcul)
        assert len(appels) == 1
        assert (cache.succes, cache.echecs) == (1, 1)
        assert a.requetes == b.requetes
        assert len(cache) == 1
        cache.close()

    def test_cle_depend_du_cpm_et_des_parametres(self):
        img = echantillons_fixtures()[2].ombre
        cache = CacheAppariements()
        cache.obtenir(img, "cpm-a", MatchConfig(), lambda x: MatchSet())
        assert cache.lire(empreinte_image(img), "cpm-b", MatchConfig()) is None
        assert cache.lire(empreinte_image(img), "cpm-a", MatchConfig(k_candidates=3)) is None
        cache.close()

    def test_fichier_persistant(self, tmp_path):
        img = echantillons_fixtures()[3].ombre
        chemin = tmp_path / "cache" / "m.sqlite"
        cache = CacheAppariements(chemin)
        cache.obtenir(img, "x", {"pas": 16}, lambda x: _matchset())
        cache.close()
        relu = CacheAppariements(chemin)
        assert relu.lire(empreinte_image(img), "x", {"pas": 16}).requetes == _matchset().requetes
        relu.close()

    def test_empreinte_sensible_au_contenu(self):
        a, b = echantillons_fixtures()[:2]
        assert empreinte_image(a.ombre) != empreinte_image(b.ombre)
        assert empreinte_image(a.ombre) == empreinte_image(ImagePlane(a.ombre.data.copy()))
