"""Representation des images, espaces couleur et entrees/sorties raster.

Ce module fournit :
    - ``ImagePlane`` / ``LightnessPlane`` : rasters flottants canal-dernier.
    - La conversion sRGB <-> CIE-LAB (illuminant D65) via ``skimage.color``.
    - L'image "sans ombre apparente" : la luminance de chaque pixel est
      recentree de sa moyenne locale (filtre moyenneur, bords repliques)
      vers la moyenne globale de l'image.
    - Le gradient par differences avant (nul sur le dernier bord), en
      version numpy et en version tenseur pour les pertes.
    - Le chargement / l'enregistrement PNG et JPEG via Pillow.

Les valeurs RGB sont dans [0, 1]. En LAB, L est dans [0, 100] et A/B dans
[-128, 127]. La quantification 8 bits n'a lieu qu'aux frontieres fichier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import uniform_filter
from skimage.color import lab2rgb, rgb2lab

from .erreurs import ErreurConfiguration, ErreurDecodage, ErreurValidation

logger = logging.getLogger(__name__)

EXTENSIONS_IMAGE = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}

# Echelles de normalisation LAB utilisees par les reseaux
ECHELLE_L = 100.0
ECHELLE_AB = 128.0

TOLERANCE_RGB = 1e-6


class EspaceCouleur(str, Enum):
    """Espace couleur d'un ``ImagePlane``."""
    RGB = "RGB"
    LAB = "LAB"


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """Raster flottant H x W x 3 avec semantique de canaux explicite.

    Attributes:
        data: Tableau ``float64`` de forme (H, W, 3).
        espace: ``EspaceCouleur.RGB`` (valeurs dans [0, 1]) ou
            ``EspaceCouleur.LAB``.
    """
    data: np.ndarray
    espace: EspaceCouleur = EspaceCouleur.RGB

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ErreurValidation(f"Forme d'image invalide: {data.shape} (attendu H x W x 3)")
        if not np.all(np.isfinite(data)):
            raise ErreurValidation("L'image contient des valeurs non finies")
        if self.espace == EspaceCouleur.RGB:
            if data.min() < -TOLERANCE_RGB or data.max() > 1 + TOLERANCE_RGB:
                raise ErreurValidation(
                    f"Valeurs RGB hors de [0, 1]: [{data.min():.6g}, {data.max():.6g}]")
            data = np.clip(data, 0.0, 1.0)
        object.__setattr__(self, "data", data)

    @property
    def hauteur(self) -> int:
        return self.data.shape[0]

    @property
    def largeur(self) -> int:
        return self.data.shape[1]

    def vers_tenseur(self) -> torch.Tensor:
        """Retourne le tenseur 1 x 3 x H x W (float32) pour les reseaux."""
        return torch.from_numpy(self.data.transpose(2, 0, 1).copy()).float().unsqueeze(0)

    @classmethod
    def depuis_tenseur(cls, t: torch.Tensor,
                       espace: EspaceCouleur = EspaceCouleur.RGB) -> "ImagePlane":
        """Construit une image depuis un tenseur 3 x H x W ou 1 x 3 x H x W."""
        if t.dim() == 4:
            t = t[0]
        data = t.detach().cpu().double().numpy().transpose(1, 2, 0)
        if espace == EspaceCouleur.RGB:
            data = np.clip(data, 0.0, 1.0)
        return cls(data, espace)


@dataclass(frozen=True, eq=False)
class LightnessPlane:
    """Raster de luminance H x W (echelle L du LAB).

    Attributes:
        data: Tableau ``float64`` de forme (H, W).
    """
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ErreurValidation(f"Forme de luminance invalide: {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ErreurValidation("La luminance contient des valeurs non finies")
        object.__setattr__(self, "data", data)


# =========================================================================
#  ESPACES COULEUR
# =========================================================================

def rgb_to_lab(img: ImagePlane) -> ImagePlane:
    """Convertit une image sRGB [0, 1] en CIE-LAB (D65).

    Args:
        img: Image en espace RGB.

    Returns:
        Image LAB de meme taille.

    Raises:
        ErreurValidation: Si l'image n'est pas en RGB.
    """
    if img.espace != EspaceCouleur.RGB:
        raise ErreurValidation("rgb_to_lab attend une image RGB")
    return ImagePlane(rgb2lab(img.data, illuminant="D65"), EspaceCouleur.LAB)


def lab_to_rgb(img: ImagePlane) -> ImagePlane:
    """Convertit une image CIE-LAB (D65) en sRGB, bornee a [0, 1].

    Les couleurs hors gamut sont acceptees et ramenees dans [0, 1].
    """
    if img.espace != EspaceCouleur.LAB:
        raise ErreurValidation("lab_to_rgb attend une image LAB")
    rgb = np.clip(lab2rgb(img.data, illuminant="D65"), 0.0, 1.0)
    return ImagePlane(rgb, EspaceCouleur.RGB)


def luminance(img: ImagePlane) -> LightnessPlane:
    """Extrait le canal L (LAB) d'une image RGB ou LAB."""
    lab = img if img.espace == EspaceCouleur.LAB else rgb_to_lab(img)
    return LightnessPlane(lab.data[..., 0])


def lab_normalise(img: ImagePlane) -> np.ndarray:
    """LAB divise par (100, 128, 128), forme H x W x 3."""
    lab = img if img.espace == EspaceCouleur.LAB else rgb_to_lab(img)
    return lab.data / np.array([ECHELLE_L, ECHELLE_AB, ECHELLE_AB])


# =========================================================================
#  IMAGE SANS OMBRE APPARENTE
# =========================================================================

def moyenne_locale(lightness: LightnessPlane, kernel: int = 3) -> np.ndarray:
    """Moyenne locale ``kernel`` x ``kernel`` avec bords repliques."""
    _verifier_noyau(kernel)
    return uniform_filter(lightness.data, size=kernel, mode="nearest")


def _verifier_noyau(kernel: int):
    if not isinstance(kernel, (int, np.integer)) or kernel < 1 or kernel % 2 == 0:
        raise ErreurConfiguration(f"Taille de noyau invalide: {kernel} (entier impair >= 1)")


def shadow_unaware(lightness: LightnessPlane, kernel: int = 3) -> LightnessPlane:
    """Calcule la luminance "sans ombre apparente".

    Chaque pixel devient ``I - moyenne_locale(I) + I_moy`` ou ``I_moy`` est
    la moyenne globale de l'image. Les bords sont repliques.

    Args:
        lightness: Luminance source.
        kernel: Taille impaire du filtre moyenneur (3 par defaut).

    Returns:
        Luminance de meme taille.

    Raises:
        ErreurConfiguration: Si ``kernel`` est pair ou < 1.
    """
    locale = moyenne_locale(lightness, kernel)
    return LightnessPlane(lightness.data - locale + lightness.data.mean())


def image_sans_ombre_apparente(img: ImagePlane, kernel: int = 3) -> ImagePlane:
    """Reconstruction RGB ou le canal L est remplace par sa version sans ombre.

    Sert de seconde moitie (3 canaux) de l'entree du module d'appariement.
    """
    lab = rgb_to_lab(img)
    l_neutre = shadow_unaware(LightnessPlane(lab.data[..., 0]), kernel)
    data = lab.data.copy()
    data[..., 0] = np.clip(l_neutre.data, 0.0, ECHELLE_L)
    return lab_to_rgb(ImagePlane(data, EspaceCouleur.LAB))


def carte_difference_ombre(img: ImagePlane, kernel: int = 3) -> np.ndarray:
    """|L - L_sans_ombre| : forte dans les ombres, faible ailleurs."""
    lum = luminance(img)
    return np.abs(lum.data - shadow_unaware(lum, kernel).data)


# =========================================================================
#  GRADIENTS
# =========================================================================

def image_gradient(img: ImagePlane | np.ndarray) -> np.ndarray:
    """Gradient par differences avant, nul sur la derniere ligne/colonne.

    Args:
        img: ``ImagePlane`` ou tableau H x W (x C).

    Returns:
        Tableau H x W x C x 2 : ``[..., 0]`` selon x (colonnes),
        ``[..., 1]`` selon y (lignes).
    """
    data = img.data if isinstance(img, ImagePlane) else np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    if data.size == 0:
        raise ErreurValidation("Image vide")
    grad = np.zeros(data.shape + (2,), dtype=np.float64)
    grad[:, :-1, :, 0] = data[:, 1:] - data[:, :-1]
    grad[:-1, :, :, 1] = data[1:] - data[:-1]
    return grad


def gradient_tenseur(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Meme schema que ``image_gradient`` sur un tenseur N x C x H x W."""
    gx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return gx, gy


# =========================================================================
#  ENTREES / SORTIES
# =========================================================================

def _format_depuis_chemin(path: Path) -> str:
    fmt = EXTENSIONS_IMAGE.get(path.suffix.lower())
    if fmt is None:
        raise ErreurDecodage(f"Format non supporte: {path} (PNG ou JPEG attendu)")
    return fmt


def _ouvrir(path: str | Path) -> Image.Image:
    path = Path(path)
    _format_depuis_chemin(path)
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except FileNotFoundError as e:
        raise ErreurDecodage(f"Fichier introuvable: {path}") from e
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ErreurDecodage(f"Image illisible: {path} ({e})") from e


def load_image(path: str | Path) -> ImagePlane:
    """Charge une image PNG/JPEG en RGB flottant [0, 1].

    Raises:
        ErreurDecodage: Fichier absent, corrompu ou de format non supporte.
    """
    im = _ouvrir(path).convert("RGB")
    return ImagePlane(np.asarray(im, dtype=np.float64) / 255.0)


def load_mask(path: str | Path) -> np.ndarray:
    """Charge un masque d'ombre binaire (seuil 0.5)."""
    im = _ouvrir(path).convert("L")
    return (np.asarray(im, dtype=np.float64) / 255.0) >= 0.5


def quantifier(data: np.ndarray) -> np.ndarray:
    """Quantifie [0, 1] vers uint8 avec arrondi au demi superieur."""
    return np.clip(np.floor(np.asarray(data) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: ImagePlane | np.ndarray, path: str | Path):
    """Enregistre une image RGB (ou un tableau H x W dans [0, 1]) en 8 bits."""
    path = Path(path)
    fmt = _format_depuis_chemin(path)
    if isinstance(img, ImagePlane):
        if img.espace != EspaceCouleur.RGB:
            img = lab_to_rgb(img)
        data = img.data
    else:
        data = np.asarray(img, dtype=np.float64)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantifier(data)).save(path, format=fmt)


def redimensionner(img: ImagePlane, taille: tuple[int, int]) -> ImagePlane:
    """Redimensionne (bilineaire) vers ``taille`` = (H, W)."""
    if (img.hauteur, img.largeur) == tuple(taille):
        return img
    canaux = []
    for c in range(3):
        im = Image.fromarray(img.data[..., c].astype(np.float32))
        canaux.append(np.asarray(im.resize((taille[1], taille[0]), Image.BILINEAR)))
    return ImagePlane(np.clip(np.stack(canaux, axis=-1), 0.0, 1.0))


def redimensionner_masque(masque: np.ndarray, taille: tuple[int, int]) -> np.ndarray:
    """Redimensionne un masque binaire au plus proche voisin."""
    if masque.shape == tuple(taille):
        return masque
    im = Image.fromarray(masque.astype(np.uint8) * 255)
    return np.asarray(im.resize((taille[1], taille[0]), Image.NEAREST)) >= 128
