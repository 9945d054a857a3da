"""Variantes d'ablation et pipeline d'inference.

Chaque variante assemble un reseau ``CANet`` et un apparieur :

    full                 CPM + CFT + deux etapes
    tm_match             correlation croisee normalisee sur la luminance
                         sans ombre apparente, meme CFT
    mnet_match_stub      apparieur externe branchable (vide par defaut)
    no_cft               aucun appariement (MatchSet toujours vide)
    direct_replace_cft   CFT avec n=1, k=1 (copie directe)
    dense_unet_only      etape 2 seule sur le LAB de l'image ombree
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Protocol

import numpy as np
import torch

from .canet import BackboneConfig, CANet, UNetConfig, tenseurs_image
from .cft import CftConfig
from .cpm import (
    STRATEGIES_REQUETES, CpmNet, Correspondance, MatchSet,
    classer_patchs_luminance, grille_patchs, match_image,
)
from .erreurs import ErreurConfiguration
from .imaging import ImagePlane, LightnessPlane, luminance, shadow_unaware

logger = logging.getLogger(__name__)


class AblationVariant(str, Enum):
    FULL = "full"
    TM_MATCH = "tm_match"
    MNET_MATCH_STUB = "mnet_match_stub"
    NO_CFT = "no_cft"
    DIRECT_REPLACE_CFT = "direct_replace_cft"
    DENSE_UNET_ONLY = "dense_unet_only"

    @classmethod
    def depuis(cls, valeur: "AblationVariant | str") -> "AblationVariant":
        try:
            return cls(valeur)
        except ValueError:
            noms = ", ".join(v.value for v in cls)
            raise ErreurConfiguration(f"Variante inconnue: {valeur} (attendu: {noms})") from None

    @property
    def utilise_cpm(self) -> bool:
        return self in (AblationVariant.FULL, AblationVariant.DIRECT_REPLACE_CFT)


@dataclass(frozen=True)
class MatchConfig:
    """Parametres d'appariement a l'inference.

    Attributes:
        grid_stride: Pas de la grille de patchs (pixels).
        k_candidates: Correspondances gardees par requete.
        score_floor: Score minimal d'une correspondance.
        strategie: Classement des patchs requetes (``"luminance"`` ou
            ``"ancres"``).
    """
    grid_stride: int = 16
    k_candidates: int = 8
    score_floor: float = 0.5
    strategie: str = "luminance"

    def __post_init__(self):
        if self.grid_stride < 1 or self.k_candidates < 1:
            raise ErreurConfiguration(f"Appariement invalide: {self}")
        if not 0.0 <= self.score_floor <= 1.0:
            raise ErreurConfiguration(f"score_floor hors de [0, 1]: {self.score_floor}")
        if self.strategie not in STRATEGIES_REQUETES:
            raise ErreurConfiguration(f"Strategie inconnue: {self.strategie}")


# =========================================================================
#  APPARIEURS
# =========================================================================

class Apparieur(Protocol):
    def __call__(self, img: ImagePlane) -> MatchSet: ...


class AppariementCpm:
    """Appariement par le reseau CPM (deux phases)."""

    def __init__(self, modele: CpmNet, cfg: MatchConfig | None = None):
        self.modele = modele
        self.cfg = cfg or MatchConfig()

    def __call__(self, img: ImagePlane) -> MatchSet:
        c = self.cfg
        return match_image(self.modele, img, grid_stride=c.grid_stride,
                           k_candidates=c.k_candidates, score_floor=c.score_floor,
                           strategie=c.strategie)


def correlation_normalisee(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation croisee normalisee de deux patchs ; 0 si l'un est constant."""
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 0.0
    return float((a * b).sum() / den)


class AppariementTm:
    """Appariement classique par correlation croisee normalisee.

    Les requetes sont classees comme pour le CPM (seuil de luminance), la
    correlation est calculee sur la luminance sans ombre apparente et
    ramenee dans [0, 1] par ``(ncc + 1) / 2``.
    """

    def __init__(self, cfg: MatchConfig | None = None, kernel: int = 3):
        self.cfg = cfg or MatchConfig()
        self.kernel = kernel

    def __call__(self, img: ImagePlane) -> MatchSet:
        c = self.cfg
        patchs = grille_patchs(img.hauteur, img.largeur, c.grid_stride)
        ombre = classer_patchs_luminance(img, patchs)
        neutre = shadow_unaware(LightnessPlane(luminance(img).data), self.kernel).data
        sources = [p for p, o in zip(patchs, ombre) if not o]
        if not sources or not ombre.any():
            return MatchSet()
        blocs = {p: p.extraire(neutre) for p in patchs}
        requetes = {}
        for q, o in zip(patchs, ombre):
            if not o:
                continue
            retenues = []
            for s in sources:
                score = (correlation_normalisee(blocs[q], blocs[s]) + 1.0) / 2.0
                if score >= c.score_floor:
                    retenues.append(Correspondance(s, score))
            retenues.sort(key=lambda x: (-x.score, x.source.ligne, x.source.colonne))
            requetes[q] = retenues[:c.k_candidates]
        return MatchSet(requetes)


class AppariementExterne:
    """Point de branchement pour un apparieur appris externe.

    Sans fonction fournie, renvoie un ``MatchSet`` vide (le pipeline se
    comporte alors comme ``no_cft``).
    """

    def __init__(self, fonction: Callable[[ImagePlane], MatchSet] | None = None):
        self.fonction = fonction
        self._averti = False

    def __call__(self, img: ImagePlane) -> MatchSet:
        if self.fonction is None:
            if not self._averti:
                logger.warning("Apparieur externe non fourni: MatchSet vide")
                self._averti = True
            return MatchSet()
        return self.fonction(img)


# =========================================================================
#  PIPELINE
# =========================================================================

@dataclass
class PipelineOmbre:
    """Reseau + apparieur d'une variante."""
    variante: AblationVariant
    reseau: CANet
    apparieur: Apparieur | None = None

    def matchset(self, img: ImagePlane) -> MatchSet:
        if self.apparieur is None:
            return MatchSet()
        return self.apparieur(img)

    @torch.no_grad()
    def supprimer(self, img: ImagePlane, matchset: MatchSet | None = None) -> ImagePlane:
        """Image RGB sans ombre, meme taille que ``img``.

        Args:
            img: Image ombree.
            matchset: Correspondances imposees (calculees sinon). Ignore
                par les variantes sans appariement.
        """
        if self.apparieur is None:
            matchset = MatchSet()
        elif matchset is None:
            matchset = self.apparieur(img)
        self.reseau.eval()
        rgb, lab = tenseurs_image(img)
        _, sortie = self.reseau(rgb, [matchset], lab)
        return ImagePlane.depuis_tenseur(sortie)


def make_variant(variante: AblationVariant | str, backbone: BackboneConfig | None = None,
                 unet: UNetConfig | None = None, cft: CftConfig | None = None,
                 cpm: CpmNet | None = None, appariement: MatchConfig | None = None,
                 apparieur_externe: Callable[[ImagePlane], MatchSet] | None = None,
                 **options) -> PipelineOmbre:
    """Construit le pipeline d'une variante.

    Args:
        variante: Identifiant de variante.
        backbone, unet, cft: Configurations des reseaux.
        cpm: Module d'appariement (requis pour ``full`` et
            ``direct_replace_cft``).
        appariement: Parametres d'appariement.
        apparieur_externe: Fonction branchee dans ``mnet_match_stub``.
        **options: Options de ``StageOne``.

    Raises:
        ErreurConfiguration: Variante inconnue ou CPM manquant.
    """
    v = AblationVariant.depuis(variante)
    cft = cft or CftConfig()
    appariement = appariement or MatchConfig()
    if v.utilise_cpm and cpm is None:
        raise ErreurConfiguration(f"La variante {v.value} requiert un CPM")

    if v == AblationVariant.DIRECT_REPLACE_CFT:
        cft = replace(cft, k=1, n=1, ancre=False)

    reseau = CANet(backbone, unet, cft, etape_un=v != AblationVariant.DENSE_UNET_ONLY, **options)

    apparieur: Apparieur | None
    if v.utilise_cpm:
        apparieur = AppariementCpm(cpm, appariement)
    elif v == AblationVariant.TM_MATCH:
        apparieur = AppariementTm(appariement)
    elif v == AblationVariant.MNET_MATCH_STUB:
        apparieur = AppariementExterne(apparieur_externe)
    else:
        apparieur = None
    logger.debug("Variante %s construite", v.value)
    return PipelineOmbre(v, reseau, apparieur)
