#!/usr/bin/env python3
"""
transfert_contextuel — Transfert de caracteristiques par echantillonnage gaussien.

Module standalone (numpy + torch uniquement). Peut etre copie dans
n'importe quel projet qui doit recopier des zones d'une carte de
caracteristiques vers d'autres zones de la meme carte, ponderees par un
score de confiance.

Algorithme :
- Echantillonnage gaussien : chaque cellule source est remplacee par la
  moyenne ponderee de son voisinage n x n (poids gaussiens, renormalises
  aux bords de la carte).
- Melange top-k : les k zones sources d'une zone cible sont combinees
  avec les poids w_i / somme(w).
- Ecriture hors place : la carte d'entree n'est jamais modifiee ; les
  zones cibles qui se recouvrent sont moyennees cellule par cellule.

Usage :
    import torch
    from transfert_contextuel import ZoneCible, ZoneSource, transferer

    carte = torch.randn(64, 16, 16)          # C x H x W
    zones = [
        ZoneCible(ligne=4, colonne=4, hauteur=4, largeur=4, sources=[
            ZoneSource(ligne=0, colonne=10, score=0.9),
            ZoneSource(ligne=12, colonne=0, score=0.6),
        ]),
    ]
    sortie = transferer(carte, zones, k=3, n=5, sigma=1.0)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__version__ = "1.0.0"
__all__ = [
    "ZoneSource",
    "ZoneCible",
    "decalages",
    "gaussian_weights",
    "gaussian_sample",
    "carte_echantillonnee",
    "blend_topk",
    "transferer",
]


# =========================================================================
#  DATACLASSES
# =========================================================================

@dataclass(frozen=True)
class ZoneSource:
    """Coin haut-gauche d'une zone source (cellules) et son score."""
    ligne: int
    colonne: int
    score: float


@dataclass
class ZoneCible:
    """Zone cible en cellules et ses sources, scores decroissants."""
    ligne: int
    colonne: int
    hauteur: int
    largeur: int
    sources: list[ZoneSource] = field(default_factory=list)


# =========================================================================
#  POIDS GAUSSIENS
# =========================================================================

def _verifier(n: int, sigma: float):
    if n < 1 or n % 2 == 0:
        raise ValueError(f"Taille de fenetre invalide (impaire >= 1 attendue): {n}")
    if not sigma > 0:
        raise ValueError(f"Sigma invalide (> 0 attendu): {sigma}")


def decalages(n: int, ancre: bool = False) -> np.ndarray:
    """Decalages de la fenetre : -n//2..n//2 (centree) ou 0..n (ancree au coin)."""
    if ancre:
        return np.arange(0, n + 1)
    r = n // 2
    return np.arange(-r, r + 1)


def gaussian_weights(n: int, sigma: float, ancre: bool = False) -> np.ndarray:
    """Table de poids phi(dx, dy) = exp(-(dx^2 + dy^2) / (2 sigma^2)) normalisee.

    Args:
        n: Taille impaire de la fenetre.
        sigma: Ecart type, > 0.
        ancre: Fenetre (n+1) x (n+1) ancree au coin au lieu de n x n centree.

    Returns:
        Tableau float64 de somme 1.

    Raises:
        ValueError: Si n est pair ou nul, ou sigma <= 0.
    """
    _verifier(n, sigma)
    d = decalages(n, ancre).astype(np.float64)
    phi = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma ** 2))
    return phi / phi.sum()


# =========================================================================
#  ECHANTILLONNAGE
# =========================================================================

def gaussian_sample(carte: torch.Tensor, centre: tuple[int, int], n: int,
                    sigma: float, ancre: bool = False) -> torch.Tensor:
    """Echantillon gaussien d'une carte C x H x W en une cellule.

    Les poids des cellules hors carte sont ignores puis le reste est
    renormalise.

    Returns:
        Vecteur de C valeurs.

    Raises:
        IndexError: Si le centre est hors de la carte.
    """
    _, h, w = carte.shape
    ligne, colonne = centre
    if not (0 <= ligne < h and 0 <= colonne < w):
        raise IndexError(f"Centre {centre} hors de la carte {h}x{w}")
    poids = gaussian_weights(n, sigma, ancre)
    d = decalages(n, ancre)
    acc = torch.zeros(carte.shape[0], dtype=carte.dtype, device=carte.device)
    total = 0.0
    for i, dy in enumerate(d):
        for j, dx in enumerate(d):
            r, c = ligne + int(dy), colonne + int(dx)
            if 0 <= r < h and 0 <= c < w:
                acc = acc + float(poids[i, j]) * carte[:, r, c]
                total += poids[i, j]
    return acc / total


def carte_echantillonnee(carte: torch.Tensor, n: int, sigma: float,
                         ancre: bool = False) -> torch.Tensor:
    """``gaussian_sample`` applique a toutes les cellules d'une carte C x H x W.

    Convolution par canal des caracteristiques divisee par la convolution
    d'une carte de uns (renormalisation aux bords).
    """
    c, h, w = carte.shape
    poids = torch.as_tensor(gaussian_weights(n, sigma, ancre), dtype=carte.dtype,
                            device=carte.device)
    taille = poids.shape[0]
    if ancre:
        bourrage = (0, n, 0, n)
    else:
        r = n // 2
        bourrage = (r, r, r, r)
    x = F.pad(carte.unsqueeze(0), bourrage)
    uns = F.pad(torch.ones(1, 1, h, w, dtype=carte.dtype, device=carte.device), bourrage)
    noyau = poids.view(1, 1, taille, taille)
    num = F.conv2d(x, noyau.repeat(c, 1, 1, 1), groups=c)
    den = F.conv2d(uns, noyau)
    return (num / den)[0]


# =========================================================================
#  MELANGE ET TRANSFERT
# =========================================================================

def blend_topk(echantillons: list[torch.Tensor], scores) -> torch.Tensor | None:
    """Combinaison convexe sum(w_i / sum(w) * F_i).

    Returns:
        Le melange, ou ``None`` si la somme des scores est nulle (aucune
        correspondance fiable).

    Raises:
        ValueError: Liste vide, formes differentes ou score negatif.
    """
    if not echantillons:
        raise ValueError("Aucun echantillon a melanger")
    if len(scores) != len(echantillons):
        raise ValueError("Autant de scores que d'echantillons attendus")
    forme = echantillons[0].shape
    if any(e.shape != forme for e in echantillons):
        raise ValueError("Echantillons de formes differentes")
    w = [float(s) for s in scores]
    if any(s < 0 for s in w):
        raise ValueError(f"Score negatif: {w}")
    somme = sum(w)
    if somme <= 0:
        return None
    sortie = torch.zeros_like(echantillons[0])
    for e, s in zip(echantillons, w):
        sortie = sortie + (s / somme) * e
    return sortie


def transferer(carte: torch.Tensor, zones: list[ZoneCible], k: int = 3, n: int = 5,
               sigma: float = 1.0, ancre: bool = False) -> torch.Tensor:
    """Transfere les zones sources echantillonnees vers les zones cibles.

    Args:
        carte: Caracteristiques C x H x W (non modifiees).
        zones: Zones cibles ; seules les ``k`` premieres sources comptent.
        k: Nombre maximal de sources par cible.
        n: Taille de la fenetre gaussienne.
        sigma: Ecart type gaussien.
        ancre: Fenetre ancree au coin.

    Returns:
        Nouvelle carte ; les cellules hors cible sont identiques a l'entree.
    """
    if k < 1:
        raise ValueError(f"k invalide (>= 1 attendu): {k}")
    if not zones:
        return carte
    _, h, w = carte.shape
    source = carte_echantillonnee(carte, n, sigma, ancre)
    acc = torch.zeros_like(carte)
    compte = torch.zeros(1, h, w, dtype=carte.dtype, device=carte.device)
    ecrit = False

    for z in zones:
        retenues = list(z.sources[:k])
        if not retenues:
            continue
        hz = min(z.hauteur, h - z.ligne, *(h - s.ligne for s in retenues))
        lz = min(z.largeur, w - z.colonne, *(w - s.colonne for s in retenues))
        if hz <= 0 or lz <= 0:
            continue
        patchs = [source[:, s.ligne:s.ligne + hz, s.colonne:s.colonne + lz] for s in retenues]
        melange = blend_topk(patchs, [s.score for s in retenues])
        if melange is None:
            continue
        acc[:, z.ligne:z.ligne + hz, z.colonne:z.colonne + lz] += melange
        compte[:, z.ligne:z.ligne + hz, z.colonne:z.colonne + lz] += 1
        ecrit = True

    if not ecrit:
        return carte
    return torch.where(compte > 0, acc / compte.clamp(min=1), carte)
