"""
Tests unitaires des images, espaces couleur et entrees/sorties.
"""

import numpy as np
import pytest
import torch

from ombrenet.erreurs import ErreurConfiguration, ErreurDecodage, ErreurValidation
from ombrenet.imaging import (
    EspaceCouleur, ImagePlane, LightnessPlane, carte_difference_ombre,
    gradient_tenseur, image_gradient, image_sans_ombre_apparente, lab_to_rgb,
    load_image, load_mask, luminance, rgb_to_lab, save_image, shadow_unaware,
)


def _uni(r, g, b, h=1, w=1):
    return ImagePlane(np.tile(np.array([r, g, b], dtype=float), (h, w, 1)))


class TestImagePlane:
    """Validation des rasters."""

    def test_forme_invalide(self):
        with pytest.raises(ErreurValidation):
            ImagePlane(np.zeros((4, 4)))

    def test_valeurs_non_finies(self):
        data = np.zeros((2, 2, 3))
        data[0, 0, 1] = np.nan
        with pytest.raises(ErreurValidation):
            ImagePlane(data)

    def test_rgb_hors_bornes(self):
        with pytest.raises(ErreurValidation):
            ImagePlane(np.full((2, 2, 3), 1.5))

    def test_lab_hors_rgb_accepte(self):
        img = ImagePlane(np.full((2, 2, 3), 50.0), EspaceCouleur.LAB)
        assert img.espace == EspaceCouleur.LAB

    def test_aller_retour_tenseur(self):
        data = np.random.default_rng(0).random((5, 7, 3))
        t = ImagePlane(data).vers_tenseur()
        assert t.shape == (1, 3, 5, 7)
        assert t.dtype == torch.float32
        retour = ImagePlane.depuis_tenseur(t)
        assert np.allclose(retour.data, data, atol=1e-6)


class TestConversionLab:
    """sRGB <-> CIE-LAB (D65)."""

    def test_blanc(self):
        lab = rgb_to_lab(_uni(1, 1, 1)).data[0, 0]
        assert lab[0] == pytest.approx(100.0, abs=1e-3)
        assert abs(lab[1]) < 0.5 and abs(lab[2]) < 0.5

    def test_noir(self):
        lab = rgb_to_lab(_uni(0, 0, 0)).data[0, 0]
        assert np.allclose(lab, 0.0, atol=1e-6)

    def test_gris_moyen(self):
        # sRGB 0.5 -> lineaire 0.21404 -> L = 116 * Y^(1/3) - 16
        lab = rgb_to_lab(_uni(0.5, 0.5, 0.5)).data[0, 0]
        assert lab[0] == pytest.approx(53.389, abs=0.01)

    def test_lab_vers_blanc_et_noir(self):
        blanc = ImagePlane(np.array([[[100.0, 0.0, 0.0]]]), EspaceCouleur.LAB)
        noir = ImagePlane(np.array([[[0.0, 0.0, 0.0]]]), EspaceCouleur.LAB)
        assert np.allclose(lab_to_rgb(blanc).data, 1.0, atol=1e-3)
        assert np.allclose(lab_to_rgb(noir).data, 0.0, atol=1e-6)

    def test_aller_retour_aleatoire(self):
        rgb = ImagePlane(np.random.default_rng(1).random((8, 8, 3)))
        retour = lab_to_rgb(rgb_to_lab(rgb))
        assert np.max(np.abs(retour.data - rgb.data)) < 1e-3

    def test_hors_gamut_borne(self):
        lab = ImagePlane(np.array([[[50.0, 127.0, -128.0]]]), EspaceCouleur.LAB)
        rgb = lab_to_rgb(lab).data
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_espace_verifie(self):
        with pytest.raises(ErreurValidation):
            rgb_to_lab(rgb_to_lab(_uni(0.2, 0.2, 0.2)))


class TestSansOmbreApparente:
    """Recentrage de la luminance par moyenne locale."""

    def test_image_constante_inchangee(self):
        lum = LightnessPlane(np.full((6, 5), 0.5))
        assert np.allclose(shadow_unaware(lum).data, 0.5)

    def test_exemple_3x3(self):
        lum = LightnessPlane(np.array([[2, 2, 2], [2, 2, 2], [8, 8, 8]], dtype=float))
        sortie = shadow_unaware(lum, 3).data
        assert sortie[1, 1] == pytest.approx(2.0)
        assert sortie[0, 0] == pytest.approx(4.0)

    def test_noyau_1_identite(self):
        data = np.random.default_rng(2).random((7, 9)) * 100
        assert np.allclose(shadow_unaware(LightnessPlane(data), 1).data, data)

    def test_moyenne_globale_conservee(self):
        data = np.random.default_rng(3).random((16, 16)) * 100
        sortie = shadow_unaware(LightnessPlane(data), 5).data
        assert sortie.shape == data.shape
        assert np.all(np.isfinite(sortie))

    @pytest.mark.parametrize("kernel", [0, 2, 4, -3])
    def test_noyau_invalide(self, kernel):
        with pytest.raises(ErreurConfiguration):
            shadow_unaware(LightnessPlane(np.zeros((3, 3))), kernel)

    def test_image_rgb_reconstruite(self):
        img = ImagePlane(np.random.default_rng(4).random((12, 12, 3)))
        neutre = image_sans_ombre_apparente(img)
        assert neutre.espace == EspaceCouleur.RGB
        assert neutre.data.shape == img.data.shape

    def test_carte_difference_forte_dans_l_ombre(self):
        data = np.full((16, 16, 3), 0.8)
        data[4:10, 4:10] = 0.2
        carte = carte_difference_ombre(ImagePlane(data))
        assert carte[6:8, 6:8].mean() > 5 * carte[13:, 13:].mean()

    def test_carte_difference_nulle_sans_ombre(self):
        carte = carte_difference_ombre(_uni(0.4, 0.5, 0.6, 8, 8))
        assert np.allclose(carte, 0.0, atol=1e-9)


class TestGradient:
    """Differences avant, nulles sur le dernier bord."""

    def test_constante(self):
        assert np.all(image_gradient(np.full((4, 4, 3), 0.3)) == 0.0)

    def test_1x2(self):
        g = image_gradient(np.array([[0.0, 3.0]]))
        assert g[0, 0, 0, 0] == 3.0
        assert g[0, 1, 0, 0] == 0.0

    def test_rampe(self):
        rampe = np.tile(np.arange(6, dtype=float), (4, 1))
        g = image_gradient(rampe)
        assert np.all(g[:, :-1, 0, 0] == 1.0)
        assert np.all(g[:, -1, 0, 0] == 0.0)
        assert np.all(g[..., 1] == 0.0)

    def test_version_tenseur_identique(self):
        data = np.random.default_rng(5).random((6, 8, 3))
        gx, gy = gradient_tenseur(torch.from_numpy(data.transpose(2, 0, 1)).unsqueeze(0))
        g = image_gradient(data)
        assert np.allclose(gx[0].numpy().transpose(1, 2, 0), g[..., 0])
        assert np.allclose(gy[0].numpy().transpose(1, 2, 0), g[..., 1])


class TestEntreesSorties:
    """PNG / JPEG via Pillow."""

    def test_aller_retour_png(self, tmp_path):
        img = ImagePlane(np.random.default_rng(6).random((10, 12, 3)))
        save_image(img, tmp_path / "x.png")
        relu = load_image(tmp_path / "x.png")
        assert np.max(np.abs(relu.data - img.data)) <= 1 / 255 + 1e-6

    def test_taille_400(self, tmp_path):
        save_image(_uni(0.5, 0.4, 0.3, 400, 400), tmp_path / "grand.png")
        img = load_image(tmp_path / "grand.png")
        assert (img.hauteur, img.largeur, img.data.shape[2]) == (400, 400, 3)

    def test_jpeg(self, tmp_path):
        save_image(_uni(0.5, 0.5, 0.5, 8, 8), tmp_path / "x.jpg")
        assert load_image(tmp_path / "x.jpg").hauteur == 8

    def test_fichier_corrompu(self, tmp_path):
        chemin = tmp_path / "casse.png"
        chemin.write_bytes(b"pas une image")
        with pytest.raises(ErreurDecodage):
            load_image(chemin)

    def test_fichier_absent(self, tmp_path):
        with pytest.raises(ErreurDecodage, match="absent.png"):
            load_image(tmp_path / "absent.png")

    def test_format_non_supporte(self, tmp_path):
        with pytest.raises(ErreurDecodage):
            save_image(_uni(0, 0, 0), tmp_path / "x.bmp")

    def test_masque_seuil(self, tmp_path):
        data = np.zeros((4, 4))
        data[:2] = 0.7
        data[2:, :2] = 0.3
        save_image(data, tmp_path / "m.png")
        masque = load_mask(tmp_path / "m.png")
        assert masque.dtype == bool
        assert masque[:2].all() and not masque[2:].any()

    def test_luminance_depuis_rgb(self):
        assert luminance(_uni(1, 1, 1)).data[0, 0] == pytest.approx(100.0, abs=1e-3)
