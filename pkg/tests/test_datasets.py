"""
Tests unitaires de l'ingestion, des etiquettes et du corpus de paires.
"""

import numpy as np
import pytest

from ombrenet.datasets import (
    Disposition, Echantillon, Partition, PatchRef, build_pair_corpus,
    charger_echantillons, ecrire_corpus, ground_truth_correlation,
    ground_truth_type, ingest_dataset, lire_corpus, patch_shadow_fraction,
    revalider_corpus, similarite_cosinus,
)
from ombrenet.erreurs import ErreurConfiguration, ErreurCorpus, ErreurValidation
from ombrenet.fixtures import (
    echantillons_fixtures, ecrire_echantillon, ecrire_jeu_fixtures, scene_synthetique,
)
from ombrenet.imaging import ImagePlane, save_image


def _masque_haut(taille=64, lignes=32):
    m = np.zeros((taille, taille), dtype=bool)
    m[:lignes] = True
    return m


class TestIngestion:
    """Conventions ISTD et SRD."""

    def test_istd_deux_triplets(self, tmp_path):
        ecrire_echantillon(scene_synthetique(1), tmp_path, Disposition.ISTD, "train", "a")
        ecrire_echantillon(scene_synthetique(2), tmp_path, Disposition.ISTD, "test", "b")
        jeu = ingest_dataset(tmp_path, "ISTD")
        assert len(jeu) == 2
        assert [r.split for r in jeu] == [Partition.TRAIN, Partition.TEST]
        assert jeu.partition("train")[0].shadow_img_path.name == "a.png"

    def test_ordre_lexicographique(self, tmp_path):
        for nom in ("c", "a", "b"):
            ecrire_echantillon(scene_synthetique(3), tmp_path, Disposition.ISTD, "train", nom)
        jeu = ingest_dataset(tmp_path, Disposition.ISTD)
        assert [r.shadow_img_path.stem for r in jeu] == ["a", "b", "c"]

    def test_srd_masque_manquant(self, tmp_path):
        ecrire_echantillon(scene_synthetique(1), tmp_path, Disposition.SRD, "train", "a")
        ecrire_echantillon(scene_synthetique(2), tmp_path, Disposition.SRD, "train", "b")
        (tmp_path / "train" / "mask" / "b.png").unlink()
        jeu = ingest_dataset(tmp_path, "SRD")
        assert len(jeu) == 1
        assert jeu.ignores == 1

    def test_srd_masques_externes(self, tmp_path):
        ecrire_echantillon(scene_synthetique(1), tmp_path / "srd", Disposition.SRD, "train", "a")
        externes = tmp_path / "masques" / "train"
        externes.mkdir(parents=True)
        (tmp_path / "srd" / "train" / "mask" / "a.png").rename(externes / "a.png")
        jeu = ingest_dataset(tmp_path / "srd", "SRD", dossier_masques=tmp_path / "masques")
        assert len(jeu) == 1

    def test_tailles_differentes_rejetees(self, tmp_path):
        ecrire_echantillon(scene_synthetique(1), tmp_path, Disposition.ISTD, "train", "a")
        save_image(np.zeros((16, 16)), tmp_path / "train" / "train_B" / "a.png")
        jeu = ingest_dataset(tmp_path, "ISTD")
        assert len(jeu) == 0
        assert jeu.rejetes == 1

    def test_racine_absente(self, tmp_path):
        with pytest.raises(ErreurValidation):
            ingest_dataset(tmp_path / "rien", "ISTD")

    def test_jeu_fixtures_charge(self, tmp_path):
        ecrire_jeu_fixtures(tmp_path, "ISTD")
        jeu = ingest_dataset(tmp_path, "ISTD")
        assert len(jeu.partition("train")) == 6
        assert len(jeu.partition("test")) == 2
        echantillons = charger_echantillons(jeu.partition("train"), workers=2)
        assert [e.image_id for e in echantillons] == list(range(6))
        assert all(e.masque.any() for e in echantillons)

    def test_redimensionnement(self, tmp_path):
        ecrire_jeu_fixtures(tmp_path, "SRD")
        jeu = ingest_dataset(tmp_path, "SRD")
        e = charger_echantillons(jeu.records[:1], taille=(48, 40))[0]
        assert (e.ombre.hauteur, e.ombre.largeur) == (48, 40)
        assert e.masque.shape == (48, 40)


class TestEtiquettes:
    """Fraction d'ombre, type et correlation de verite terrain."""

    def test_fraction_pleine_et_vide(self):
        m = _masque_haut()
        assert patch_shadow_fraction(PatchRef(0, 0, 0), m) == 1.0
        assert patch_shadow_fraction(PatchRef(0, 32, 0), m) == 0.0

    def test_fraction_moitie(self):
        m = _masque_haut(64, 16)
        assert patch_shadow_fraction(PatchRef(0, 0, 10), m) == 0.5

    def test_types(self):
        m = _masque_haut()
        ombre, lumiere = PatchRef(0, 0, 0), PatchRef(0, 32, 32)
        assert ground_truth_type(ombre, lumiere, m) == 1
        assert ground_truth_type(lumiere, ombre, m) == -1
        assert ground_truth_type(lumiere, PatchRef(0, 32, 0), m) == 0

    def test_fractions_au_seuil(self):
        m = _masque_haut(64, 16)
        assert ground_truth_type(PatchRef(0, 0, 0), PatchRef(0, 0, 32), m) == 0

    def test_correlation_identique(self):
        img = ImagePlane(np.random.default_rng(0).random((64, 64, 3)))
        p = PatchRef(0, 5, 5)
        assert ground_truth_correlation(p, p, img) == 1

    def test_correlation_orthogonale(self):
        data = np.zeros((32, 64, 3))
        data[:, :32, 0] = 1.0
        data[:, 32:, 1] = 1.0
        img = ImagePlane(data)
        assert ground_truth_correlation(PatchRef(0, 0, 0), PatchRef(0, 0, 32), img) == 0

    def test_correlation_ecartee(self):
        # cos = 0.8 entre (1, 0) et (0.8, 0.6) : zone grise
        data = np.zeros((32, 64, 3))
        data[:, :32, 0] = 1.0
        data[:, 32:, 0] = 0.8
        data[:, 32:, 1] = 0.6
        img = ImagePlane(data)
        assert similarite_cosinus(data[:, :32], data[:, 32:]) == pytest.approx(0.8)
        assert ground_truth_correlation(PatchRef(0, 0, 0), PatchRef(0, 0, 32), img) is None

    def test_patch_hors_image(self):
        with pytest.raises(ErreurValidation):
            PatchRef(0, 40, 0).extraire(np.zeros((64, 64)))


class TestCorpus:
    """Construction, equilibre et persistance du corpus."""

    def test_equilibre(self):
        corpus = build_pair_corpus(echantillons_fixtures(), 100, 7)
        assert len(corpus) == 100
        assert corpus.compter() == (50, 50)

    def test_meme_graine_memes_octets(self, tmp_path):
        e = echantillons_fixtures()
        h1 = ecrire_corpus(build_pair_corpus(e, 100, 7), tmp_path / "a.bin")
        h2 = ecrire_corpus(build_pair_corpus(e, 100, 7), tmp_path / "b.bin")
        assert h1 == h2
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_graine_differente(self):
        e = echantillons_fixtures()
        a = build_pair_corpus(e, 40, 1)
        b = build_pair_corpus(e, 40, 2)
        assert [p.first for p in a.paires] != [p.first for p in b.paires]

    def test_sans_ombre_types_nuls(self):
        scenes = [scene_synthetique(30 + i, avec_ombre=False, image_id=i) for i in range(4)]
        corpus = build_pair_corpus(scenes, 40, 3)
        assert {p.label.type for p in corpus.paires} == {0}

    def test_voie2_jamais_meme_position(self):
        corpus = build_pair_corpus(echantillons_fixtures(), 100, 5)
        for p in corpus.paires:
            if not p.voie1:
                assert (p.first.ligne, p.first.colonne) != (p.second.ligne, p.second.colonne)
            else:
                assert p.label.correlation == 1.0

    def test_relecture_et_revalidation(self, tmp_path):
        e = echantillons_fixtures()
        corpus = build_pair_corpus(e, 60, 11)
        ecrire_corpus(corpus, tmp_path / "c.bin")
        relu = lire_corpus(tmp_path / "c.bin")
        assert relu.paires == corpus.paires
        assert relu.entete["graine"] == 11
        assert revalider_corpus(relu, e) == []

    def test_n_impair(self):
        with pytest.raises(ErreurConfiguration):
            build_pair_corpus(echantillons_fixtures(), 11, 0)

    def test_corpus_impossible(self):
        uni = ImagePlane(np.full((64, 64, 3), 0.5))
        e = Echantillon(0, uni, uni, np.zeros((64, 64), dtype=bool))
        with pytest.raises(ErreurCorpus, match="0 non-correspondances"):
            build_pair_corpus([e], 10, 0, max_tentatives=500)

    def test_corpus_tronque(self, tmp_path):
        ecrire_corpus(build_pair_corpus(echantillons_fixtures(), 20, 0), tmp_path / "c.bin")
        contenu = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(contenu[:-3])
        with pytest.raises(ErreurCorpus):
            lire_corpus(tmp_path / "t.bin")
