"""
Tests des boucles d'entrainement, de la configuration et des points de controle.
"""

import json
import math

import pytest
import torch
from torch.utils.data import DataLoader

from ombrenet.canet import BackboneConfig, UNetConfig
from ombrenet.config import (
    TrainConfig, appliquer_surcharges, charger_config, depuis_dict, hash_config,
)
from ombrenet.cpm import DatasetPaires
from ombrenet.datasets import CorpusPaires, build_pair_corpus
from ombrenet.erreurs import (
    ErreurConfiguration, ErreurPerteNonFinie, ErreurPointControle, ErreurValidation,
)
from ombrenet.evaluation import ablation, table_ablation
from ombrenet.fixtures import corpus_bandes, echantillons_fixtures, scene_bandes
from ombrenet.journal import JournalEntrainement
from ombrenet.points_controle import Checkpoint, charger_pipeline, cpm_depuis, empreinte_poids
from ombrenet.training import evaluer_cpm, set_global_determinism, train_canet, train_cpm


def _cfg(tmp_path, **surcharges):
    base = dict(
        checkpoint_dir=str(tmp_path / "ckpt"),
        barre_progression=False,
        epochs_cpm=2,
        epochs_canet=1,
        batch_cpm=16,
        n_paires=64,
        backbone=BackboneConfig(largeurs=(8, 16, 16), croissance=4, couches_dense=1),
        unet=UNetConfig(largeurs=(8, 16), croissance=4, couches_dense=1),
    )
    base.update(surcharges)
    return TrainConfig.bureau(**base)


@pytest.fixture(scope="module")
def echantillons():
    return echantillons_fixtures()[:4]


@pytest.fixture(scope="module")
def corpus(echantillons):
    return build_pair_corpus(echantillons, 64, 0)


class TestConfiguration:
    """Defauts, fichiers partiels et surcharges."""

    def test_defauts_reference(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-4
        assert cfg.betas == (0.9, 0.999)
        assert cfg.weight_decay == 5e-4
        assert cfg.batch_size == 2
        assert cfg.input_size == (400, 400)
        assert (cfg.loss_weights.lambda_rem, cfg.loss_weights.lambda_per,
                cfg.loss_weights.lambda_grad) == (1.0, 25.0, 5.0)
        assert (cfg.cft.k, cfg.cft.n) == (3, 5)
        assert cfg.mode_rem == "norme"

    def test_toml_partiel(self, tmp_path):
        chemin = tmp_path / "c.toml"
        chemin.write_text('variant = "no_cft"\nlr = 0.01\n[cft]\nk = 5\n', encoding="utf-8")
        cfg = charger_config(chemin)
        assert cfg.variant == "no_cft"
        assert cfg.lr == 0.01
        assert cfg.cft.k == 5 and cfg.cft.n == 5

    def test_json_sur_base(self, tmp_path):
        chemin = tmp_path / "c.json"
        chemin.write_text(json.dumps({"unet": {"largeurs": [4, 8]}}), encoding="utf-8")
        cfg = charger_config(chemin, TrainConfig.bureau())
        assert cfg.unet.largeurs == (4, 8)
        assert cfg.input_size == (64, 64)

    def test_cle_inconnue(self, tmp_path):
        chemin = tmp_path / "c.toml"
        chemin.write_text("taux = 3\n", encoding="utf-8")
        with pytest.raises(ErreurConfiguration, match="taux"):
            charger_config(chemin)

    def test_syntaxe_invalide(self, tmp_path):
        chemin = tmp_path / "c.toml"
        chemin.write_text("lr = = 3\n", encoding="utf-8")
        with pytest.raises(ErreurConfiguration):
            charger_config(chemin)

    def test_surcharges(self):
        cfg = appliquer_surcharges(TrainConfig(), ["cft.sigma=2.5", "variant=tm_match", "seed=7"])
        assert cfg.cft.sigma == 2.5
        assert cfg.variant == "tm_match"
        assert cfg.seed == 7

    def test_surcharge_sans_egal(self):
        with pytest.raises(ErreurConfiguration):
            appliquer_surcharges(TrainConfig(), ["lr"])

    @pytest.mark.parametrize("params", [
        {"variant": "rien"}, {"layout": "XYZ"}, {"n_paires": 11}, {"mode_rem": "l1"},
        {"input_size": (16, 16)}, {"lr": 0.0},
    ])
    def test_valeurs_invalides(self, params):
        with pytest.raises(ErreurConfiguration):
            depuis_dict(params)

    def test_empreinte(self):
        a = TrainConfig.bureau()
        assert hash_config(a) == hash_config(TrainConfig.bureau(epochs_cpm=3, checkpoint_dir="ailleurs"))
        assert hash_config(a) != hash_config(TrainConfig.bureau(lr=0.5))

    def test_aller_retour_dict(self):
        cfg = TrainConfig.bureau(niveaux_cft=(1, 2))
        assert depuis_dict(cfg.vers_dict()) == cfg


class TestCpm:
    """Entrainement du CPM."""

    def test_determinisme(self, tmp_path, echantillons, corpus):
        a = train_cpm(_cfg(tmp_path / "a"), corpus, echantillons)
        b = train_cpm(_cfg(tmp_path / "b"), corpus, echantillons)
        assert [h["total"] for h in a.historique] == [h["total"] for h in b.historique]
        assert empreinte_poids(a.modele) == empreinte_poids(b.modele)

    def test_graines_differentes(self, tmp_path, echantillons, corpus):
        a = train_cpm(_cfg(tmp_path / "a", epochs_cpm=1), corpus, echantillons)
        b = train_cpm(_cfg(tmp_path / "b", epochs_cpm=1, seed=1), corpus, echantillons)
        assert empreinte_poids(a.modele) != empreinte_poids(b.modele)

    def test_journal_et_point_controle(self, tmp_path, echantillons, corpus):
        journal = JournalEntrainement()
        res = train_cpm(_cfg(tmp_path), corpus, echantillons, journal=journal)
        assert len(journal.valeurs("total", phase="cpm")) == 2
        assert res.chemin == tmp_path / "ckpt" / "cpm.pt"
        ckpt = Checkpoint.charger(res.chemin, "cpm")
        assert ckpt.epoque == 2
        assert empreinte_poids(cpm_depuis(ckpt)) == empreinte_poids(res.modele)

    def test_journal_fichier_par_defaut(self, tmp_path, echantillons, corpus):
        train_cpm(_cfg(tmp_path, epochs_cpm=1), corpus, echantillons)
        lignes = (tmp_path / "ckpt" / "journal.jsonl").read_text(encoding="utf-8").splitlines()
        entree = json.loads(lignes[-1])
        assert entree["phase"] == "cpm"
        assert {"etape", "reg", "cls", "total", "lr", "temps"} <= entree.keys()

    def test_reprise_identique(self, tmp_path, echantillons, corpus):
        complet = train_cpm(_cfg(tmp_path / "complet"), corpus, echantillons)
        moitie = train_cpm(_cfg(tmp_path / "moitie", epochs_cpm=1), corpus, echantillons)
        reprise = train_cpm(_cfg(tmp_path / "reprise"), corpus, echantillons,
                            reprise=Checkpoint.charger(moitie.chemin))
        assert len(reprise.historique) == 1
        assert reprise.historique[0]["total"] == pytest.approx(complet.historique[1]["total"], rel=1e-6)

    def test_reprise_configuration_differente(self, tmp_path, echantillons, corpus):
        res = train_cpm(_cfg(tmp_path, epochs_cpm=1), corpus, echantillons)
        with pytest.raises(ErreurPointControle):
            train_cpm(_cfg(tmp_path, lr=0.5), corpus, echantillons, reprise=res.point_controle)

    def test_perte_non_finie(self, tmp_path, echantillons, corpus):
        def empoisonner(epoque, modele):
            with torch.no_grad():
                for p in modele.parameters():
                    p.fill_(float("nan"))

        with pytest.raises(ErreurPerteNonFinie) as exc:
            train_cpm(_cfg(tmp_path), corpus, echantillons, rappel_epoque=empoisonner)
        ckpt = Checkpoint.charger(exc.value.point_controle)
        assert ckpt.epoque == 1
        assert all(torch.isfinite(t).all() for t in ckpt.poids.values() if t.is_floating_point())

    def test_corpus_vide(self, tmp_path, echantillons, corpus):
        with pytest.raises(ErreurValidation):
            train_cpm(_cfg(tmp_path), CorpusPaires([], {}), echantillons)


class TestPointControle:
    """Format et reecriture."""

    def test_reecriture_octet_pour_octet(self, tmp_path, echantillons, corpus):
        res = train_cpm(_cfg(tmp_path, epochs_cpm=1), corpus, echantillons)
        copie = tmp_path / "copie" / "cpm.pt"
        Checkpoint.charger(res.chemin).sauver(copie)
        assert copie.read_bytes() == res.chemin.read_bytes()

    def test_type_inattendu(self, tmp_path, echantillons, corpus):
        res = train_cpm(_cfg(tmp_path, epochs_cpm=1), corpus, echantillons)
        with pytest.raises(ErreurPointControle):
            Checkpoint.charger(res.chemin, "canet")

    def test_fichier_etranger(self, tmp_path):
        chemin = tmp_path / "x.pt"
        torch.save({"poids": {}}, chemin)
        with pytest.raises(ErreurPointControle):
            Checkpoint.charger(chemin)

    def test_version_inconnue(self, tmp_path, echantillons, corpus):
        res = train_cpm(_cfg(tmp_path, epochs_cpm=1), corpus, echantillons)
        d = torch.load(res.chemin, weights_only=False)
        d["version"] = 99
        torch.save(d, tmp_path / "v.pt")
        with pytest.raises(ErreurPointControle, match="99"):
            Checkpoint.charger(tmp_path / "v.pt")


class TestCanet:
    """Entrainement de CANet, CPM fige."""

    def test_dense_unet_seul(self, tmp_path, echantillons):
        journal = JournalEntrainement()
        res = train_canet(_cfg(tmp_path, variant="dense_unet_only"), echantillons[:2], journal=journal)
        assert len(res.historique) == 1
        assert math.isfinite(res.historique[0]["val_rmse"])
        assert len(journal.valeurs("total", phase="canet")) == 1
        assert journal.valeurs("val_rmse", phase="validation")

    def test_cpm_requis(self, tmp_path, echantillons):
        with pytest.raises(ErreurConfiguration):
            train_canet(_cfg(tmp_path), echantillons[:2])

    def test_cpm_fige(self, tmp_path, echantillons, corpus):
        cpm = train_cpm(_cfg(tmp_path, epochs_cpm=1), corpus, echantillons)
        avant = empreinte_poids(cpm.modele)
        res = train_canet(_cfg(tmp_path), echantillons[:2], cpm=cpm.chemin)
        ckpt = Checkpoint.charger(res.chemin, "canet")
        assert empreinte_poids(ckpt.cpm_poids) == avant
        assert ckpt.variante == "full"

    def test_pipeline_recharge(self, tmp_path, echantillons):
        res = train_canet(_cfg(tmp_path, variant="no_cft"), echantillons[:2])
        pipeline = charger_pipeline(res.chemin)
        img = echantillons[0].ombre
        attendu = res.modele.supprimer(img).data
        assert (pipeline.supprimer(img).data == attendu).all()
        with pytest.raises(ErreurPointControle):
            charger_pipeline(res.chemin, variante="full")

    def test_reprise_identique(self, tmp_path, echantillons):
        paires = echantillons[:2]
        journaux = {nom: JournalEntrainement() for nom in ("complet", "moitie", "reprise")}
        complet = train_canet(_cfg(tmp_path / "complet", variant="no_cft", epochs_canet=2), paires,
                              journal=journaux["complet"])
        moitie = train_canet(_cfg(tmp_path / "moitie", variant="no_cft", epochs_canet=1), paires,
                             journal=journaux["moitie"])
        reprise = train_canet(_cfg(tmp_path / "reprise", variant="no_cft", epochs_canet=2), paires,
                              journal=journaux["reprise"], reprise=Checkpoint.charger(moitie.chemin))
        pertes = journaux["complet"].valeurs("total", phase="canet")
        n = len(journaux["moitie"].valeurs("total", phase="canet"))
        suite = journaux["reprise"].valeurs("total", phase="canet")
        assert suite[0] == pytest.approx(pertes[n], rel=1e-5)
        assert suite == pytest.approx(pertes[n:], rel=1e-5)
        assert reprise.historique[0]["val_rmse"] == pytest.approx(complet.historique[1]["val_rmse"], rel=1e-5)

    def test_zero_epoque(self, tmp_path, echantillons):
        res = train_canet(_cfg(tmp_path, variant="dense_unet_only", epochs_canet=0), echantillons[:1])
        assert res.historique == []
        assert Checkpoint.charger(res.chemin).epoque == 0


class TestDeterminisme:

    def test_generateur(self):
        a = torch.randperm(10, generator=set_global_determinism(3)).tolist()
        b = torch.randperm(10, generator=set_global_determinism(3)).tolist()
        assert a == b


@pytest.mark.lent
class TestSurApprentissage:
    """Experiences de bureau : sur-apprentissage et ablation directionnelle."""

    @pytest.fixture(scope="class")
    def cpm(self, tmp_path_factory, echantillons, corpus):
        return train_cpm(_cfg(tmp_path_factory.mktemp("cpm")), corpus, echantillons).modele

    def test_cpm_corpus_reduit(self, tmp_path):
        scenes = [scene_bandes(i, image_id=i) for i in range(2)]
        corpus = corpus_bandes(scenes, 32, 0)
        assert 0 < len(corpus) <= 64
        cfg = _cfg(tmp_path, epochs_cpm=200, batch_cpm=16, part_validation=0.0, weight_decay=0.0)
        res = train_cpm(cfg, corpus, scenes)
        metriques = evaluer_cpm(res.modele, DataLoader(DatasetPaires(corpus, scenes), batch_size=64))
        assert metriques["precision"] == 1.0
        assert metriques["reg"] < 0.01

    def test_variante_complete(self, tmp_path, cpm):
        paires = echantillons_fixtures()[:2]
        cfg = TrainConfig.bureau(checkpoint_dir=str(tmp_path), barre_progression=False, epochs_canet=500)
        res = train_canet(cfg, paires, cpm=cpm)
        assert res.point_controle.etape == 500
        assert res.historique[-1]["val_rmse"] < 3.0

    def test_dense_unet_seul_jamais_meilleur(self, tmp_path, cpm):
        paires = echantillons_fixtures()[:2]
        pas_meilleur = 0
        for graine in range(5):
            modeles = {}
            for variante in ("full", "dense_unet_only"):
                cfg = TrainConfig.bureau(checkpoint_dir=str(tmp_path / f"{variante}_{graine}"),
                                         barre_progression=False, epochs_canet=150,
                                         seed=graine, variant=variante)
                modeles[variante] = train_canet(cfg, paires, cpm=cpm).modele
            rapports = ablation(modeles, paires)
            assert len(table_ablation(rapports).splitlines()) == 2 + 2
            complet, dense = (r.agregat["all"] for r in rapports)
            pas_meilleur += dense >= complet
        assert pas_meilleur >= 4
