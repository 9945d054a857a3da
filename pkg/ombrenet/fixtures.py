"""Fixtures de bureau : scenes ombrees generees de facon deterministe.

Deux familles de scenes :
    - synthetiques : tuiles de couleurs saturees, ombre rectangulaire nette
      qui divise la luminance L par deux sans toucher A/B ;
    - "style reel" : texture lisse aleatoire, ombre elliptique douce avec
      dominante bleue (attenuation plus forte sur R que sur B).

``ecrire_jeu_fixtures`` range ces scenes sur disque selon la convention
ISTD ou SRD pour les tests d'ingestion, de CLI et le profil de bureau.
``scene_bandes`` et ``corpus_bandes`` fournissent un corpus CPM separable
(deux materiaux, intensites ombre / eclaire disjointes).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .datasets import (
    TAILLE_PATCH, CorpusPaires, Disposition, Echantillon, PairLabel, PatchPair,
    PatchRef, ground_truth_correlation, ground_truth_type,
)
from .imaging import EspaceCouleur, ImagePlane, lab_to_rgb, rgb_to_lab, save_image

PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.10, 0.20, 0.90],
    [0.95, 0.85, 0.10],
    [0.10, 0.85, 0.85],
    [0.85, 0.10, 0.80],
])

# Attenuation RGB de l'ombre "style reel" (dominante bleue)
ATTENUATION_REELLE = np.array([0.42, 0.48, 0.60])


def _tuiles(rng: np.random.Generator, taille: int, tuile: int) -> np.ndarray:
    n = -(-taille // tuile)
    couleurs = PALETTE[rng.integers(0, len(PALETTE), size=(n, n))]
    img = np.repeat(np.repeat(couleurs, tuile, axis=0), tuile, axis=1)[:taille, :taille]
    img = img + rng.uniform(-0.02, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def masque_rectangle(taille: int, debut: int, fin: int) -> np.ndarray:
    """Masque carre [debut, fin) x [debut, fin)."""
    m = np.zeros((taille, taille), dtype=bool)
    m[debut:fin, debut:fin] = True
    return m


def assombrir_luminance(img: ImagePlane, masque: np.ndarray, facteur: float = 0.5) -> ImagePlane:
    """Multiplie L par ``facteur`` dans le masque, A/B inchanges."""
    lab = rgb_to_lab(img).data.copy()
    lab[..., 0] = np.where(masque, lab[..., 0] * facteur, lab[..., 0])
    return lab_to_rgb(ImagePlane(lab, EspaceCouleur.LAB))


def scene_synthetique(graine: int, taille: int = 64, tuile: int = 32,
                      avec_ombre: bool = True, image_id: int = 0) -> Echantillon:
    """Scene de tuiles saturees avec ombre centrale (luminance / 2)."""
    rng = np.random.default_rng(graine)
    libre = ImagePlane(_tuiles(rng, taille, tuile))
    if avec_ombre:
        masque = masque_rectangle(taille, taille // 4, 3 * taille // 4)
    else:
        masque = np.zeros((taille, taille), dtype=bool)
    ombre = assombrir_luminance(libre, masque) if masque.any() else libre
    return Echantillon(image_id, ombre, libre, masque)


def scene_style_reel(graine: int, taille: int = 64, image_id: int = 0) -> Echantillon:
    """Texture lisse aleatoire avec ombre elliptique douce et dominante bleue."""
    rng = np.random.default_rng(graine)
    bruit = rng.uniform(0.0, 1.0, size=(taille, taille, 3))
    texture = np.stack([gaussian_filter(bruit[..., c], sigma=taille / 16) for c in range(3)], -1)
    texture = (texture - texture.min()) / max(texture.max() - texture.min(), 1e-9)
    libre = np.clip(0.25 + 0.7 * texture, 0.0, 1.0)

    yy, xx = np.mgrid[0:taille, 0:taille] / taille
    cy, cx = rng.uniform(0.4, 0.6, size=2)
    ry, rx = rng.uniform(0.2, 0.3, size=2)
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    alpha = np.clip(1.5 - d, 0.0, 1.0)[..., None]
    facteur = 1.0 - alpha * (1.0 - ATTENUATION_REELLE)
    ombre = np.clip(libre * facteur, 0.0, 1.0)
    masque = alpha[..., 0] >= 0.5
    return Echantillon(image_id, ImagePlane(ombre), ImagePlane(libre), masque)


def damier_ombre(taille: int = 128, case: int = 8, debut: int = 32, fin: int = 96,
                 facteur: float = 0.35) -> Echantillon:
    """Damier a faible contraste de luminance avec region carree assombrie."""
    a = np.array([0.80, 0.62, 0.52])
    b = np.array([0.60, 0.72, 0.80])
    yy, xx = np.mgrid[0:taille, 0:taille]
    damier = np.where((((yy // case) + (xx // case)) % 2 == 0)[..., None], a, b)
    masque = masque_rectangle(taille, debut, fin)
    ombre = np.where(masque[..., None], damier * facteur, damier)
    return Echantillon(0, ImagePlane(ombre), ImagePlane(damier), masque)


def scene_bandes(graine: int, taille: int = 128, image_id: int = 0) -> Echantillon:
    """Deux materiaux (rouge en haut, vert en bas), moitie gauche a l'ombre.

    Sur le canal dominant, l'eclaire reste dans [0.8, 0.9] et l'ombre sous
    0.23 : les bandes d'intensite sont disjointes.
    """
    rng = np.random.default_rng(graine)
    moitie = taille // 2
    base = np.empty((taille, taille, 3))
    base[:moitie] = (0.85, 0.2, 0.2)
    base[moitie:] = (0.2, 0.85, 0.2)
    libre = np.clip(base + rng.uniform(-0.05, 0.05, size=base.shape), 0.0, 1.0)
    masque = np.zeros((taille, taille), dtype=bool)
    masque[:, :moitie] = True
    facteur = rng.uniform(0.15, 0.25, size=(taille, taille, 1))
    ombre = np.where(masque[..., None], libre * facteur, libre)
    return Echantillon(image_id, ImagePlane(ombre), ImagePlane(libre), masque)


def corpus_bandes(scenes: list[Echantillon], n_par_image: int, graine: int) -> CorpusPaires:
    """Paires de patchs tires chacun dans un seul quadrant de ``scene_bandes``.

    Type d'apres le masque, degre de correlation d'apres l'image sans ombre
    (1 meme materiau, 0 sinon) ; positions identiques et paires ecartees
    sont sautees.
    """
    rng = np.random.default_rng(graine)
    paires = []
    for e in scenes:
        moitie = e.masque.shape[0] // 2
        for _ in range(n_par_image):
            coins = []
            for _ in range(2):
                ligne = int(rng.choice([0, moitie]) + rng.integers(0, moitie - TAILLE_PATCH + 1))
                colonne = int(rng.choice([0, moitie]) + rng.integers(0, moitie - TAILLE_PATCH + 1))
                coins.append(PatchRef(e.image_id, ligne, colonne))
            p1, p2 = coins
            if (p1.ligne, p1.colonne) == (p2.ligne, p2.colonne):
                continue
            correlation = ground_truth_correlation(p1, p2, e.sans_ombre)
            if correlation is None:
                continue
            paires.append(PatchPair(p1, p2, PairLabel(ground_truth_type(p1, p2, e.masque),
                                                      float(correlation))))
    return CorpusPaires(paires, {})


def echantillons_fixtures(taille: int = 64) -> list[Echantillon]:
    """Les 8 fixtures de bureau : 4 synthetiques puis 4 "style reel"."""
    scenes = [scene_synthetique(10 + i, taille, image_id=i) for i in range(4)]
    scenes += [scene_style_reel(20 + i, taille, image_id=4 + i) for i in range(4)]
    return scenes


def ecrire_echantillon(e: Echantillon, root: Path, layout: Disposition, split: str, nom: str):
    """Ecrit un echantillon selon la convention ISTD ou SRD."""
    if layout == Disposition.ISTD:
        base = root / split
        chemins = (base / f"{split}_A" / f"{nom}.png",
                   base / f"{split}_C" / f"{nom}.png",
                   base / f"{split}_B" / f"{nom}.png")
    else:
        base = root / split
        chemins = (base / "shadow" / f"{nom}.png",
                   base / "shadow_free" / f"{nom}_no_shadow.png",
                   base / "mask" / f"{nom}.png")
    save_image(e.ombre, chemins[0])
    save_image(e.sans_ombre, chemins[1])
    save_image(e.masque.astype(np.float64), chemins[2])
    return chemins


def ecrire_jeu_fixtures(root: str | Path, layout: Disposition | str = Disposition.ISTD,
                        taille: int = 64, n_test: int = 2) -> Path:
    """Ecrit les 8 fixtures (les ``n_test`` dernieres en partition test)."""
    root = Path(root)
    layout = Disposition(layout)
    scenes = echantillons_fixtures(taille)
    for i, e in enumerate(scenes):
        split = "test" if i >= len(scenes) - n_test else "train"
        ecrire_echantillon(e, root, layout, split, f"scene_{i:02d}")
    return root
