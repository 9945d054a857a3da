"""Transfert de caracteristiques contextuelles (CFT) sur un niveau de pyramide.

Fait le lien entre un ``MatchSet`` (coordonnees en pixels) et le moteur
``transfert_contextuel`` (coordonnees en cellules) : un patch 32x32 en
(ligne, colonne) devient la zone de cellules
(floor(ligne / s), floor(colonne / s)) d'etendue ceil(32 / s) au pas s.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from transfert_contextuel import ZoneCible, ZoneSource, transferer

from .cpm import MatchSet
from .erreurs import ErreurConfiguration, ErreurValidation
from .imaging import save_image

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CftConfig:
    """Parametres du transfert.

    Attributes:
        k: Nombre de correspondances melangees par patch requete.
        n: Taille impaire de la fenetre gaussienne.
        sigma: Ecart type gaussien.
        ancre: Fenetre ancree au coin (decalages 0..n) au lieu de centree.
    """
    k: int = 3
    n: int = 5
    sigma: float = 1.0
    ancre: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ErreurConfiguration(f"CFT: k doit etre >= 1 ({self.k})")
        if self.n < 1 or self.n % 2 == 0:
            raise ErreurConfiguration(f"CFT: n doit etre impair et >= 1 ({self.n})")
        if not self.sigma > 0:
            raise ErreurConfiguration(f"CFT: sigma doit etre > 0 ({self.sigma})")


def zones_cellules(matchset: MatchSet, stride: int) -> list[ZoneCible]:
    """Convertit les patchs du ``MatchSet`` en zones de cellules au pas ``stride``."""
    zones = []
    for q, corr in matchset.requetes.items():
        if not corr:
            continue
        etendue = math.ceil(q.taille / stride)
        zones.append(ZoneCible(
            q.ligne // stride, q.colonne // stride, etendue, etendue,
            [ZoneSource(c.source.ligne // stride, c.source.colonne // stride, c.score)
             for c in corr]))
    return zones


def _transferer(carte: torch.Tensor, stride: int, matchset: MatchSet, cfg: CftConfig) -> torch.Tensor:
    if matchset.est_vide:
        return carte
    try:
        return transferer(carte, zones_cellules(matchset, stride),
                          k=cfg.k, n=cfg.n, sigma=cfg.sigma, ancre=cfg.ancre)
    except (ValueError, IndexError) as exc:
        raise ErreurConfiguration(f"CFT impossible au pas {stride}: {exc}") from exc


def apply_cft(niveau: torch.Tensor, stride: int, matchsets: MatchSet | Sequence[MatchSet],
              cfg: CftConfig | None = None) -> torch.Tensor:
    """Applique le CFT a un niveau C x H x W ou B x C x H x W.

    Args:
        niveau: Caracteristiques d'une image ou d'un lot.
        stride: Pas du niveau en pixels.
        matchsets: Un ``MatchSet`` (image seule ou lot de un) ou un par
            element du lot.
        cfg: Parametres du transfert.

    Returns:
        Nouveau tenseur de meme forme ; l'entree est renvoyee telle quelle
        si tous les ``MatchSet`` sont vides.

    Raises:
        ErreurValidation: Nombre de ``MatchSet`` different de la taille du lot.
        ErreurConfiguration: Correspondances inutilisables (score negatif,
            zone hors carte).
    """
    cfg = cfg or CftConfig()
    if isinstance(matchsets, MatchSet):
        matchsets = [matchsets]
    matchsets = list(matchsets)
    if niveau.dim() == 3:
        if len(matchsets) != 1:
            raise ErreurValidation("Un seul MatchSet attendu pour une carte C x H x W")
        return _transferer(niveau, stride, matchsets[0], cfg)
    if len(matchsets) != niveau.shape[0]:
        raise ErreurValidation(
            f"Un MatchSet par image du lot attendu ({len(matchsets)} pour {niveau.shape[0]})")
    if all(m.est_vide for m in matchsets):
        return niveau
    return torch.stack([_transferer(niveau[b], stride, m, cfg) for b, m in enumerate(matchsets)])


def carte_transfert(avant: torch.Tensor, apres: torch.Tensor) -> np.ndarray:
    """Norme par cellule du changement apporte par le transfert, dans [0, 1]."""
    if avant.dim() == 4:
        avant, apres = avant[0], apres[0]
    delta = torch.linalg.vector_norm((apres - avant).detach().float(), dim=0).cpu().numpy()
    pic = delta.max()
    return delta / pic if pic > 0 else delta


def exporter_carte_transfert(avant: torch.Tensor, apres: torch.Tensor,
                             chemin: str | Path) -> Path:
    """Ecrit la carte de transfert en PNG 8 bits (debogage)."""
    chemin = Path(chemin)
    save_image(carte_transfert(avant, apres), chemin)
    logger.debug("Carte de transfert ecrite: %s", chemin)
    return chemin
