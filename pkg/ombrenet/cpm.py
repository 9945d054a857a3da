"""Module d'appariement contextuel de patchs (CPM).

Reseau a deux tetes sur des paires de patchs 32x32 :
    - un extracteur partage (4 convolutions, 3 blocs residuels, goulot
      lineaire 256) ;
    - une tete de type (3 classes, softmax) : indice 0 pour -1
      (hors ombre, ombre), 1 pour 0 (meme classe), 2 pour +1
      (ombre, hors ombre) ;
    - une tete de correlation (sortie logistique dans [0, 1]).

Les deux tetes recoivent la concatenation des deux descripteurs
(512 -> 256 -> 128 -> 3 ou 1).

L'entree d'un patch a 6 canaux : RGB de l'image ombree puis RGB de l'image
sans ombre apparente (canal L remplace).

``match_image`` applique le reseau en deux phases sur une grille : une
extraction de descripteurs par patch, puis l'evaluation des paires
(ombre, hors ombre) par les deux tetes seulement.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import Dataset

from .datasets import TAILLE_PATCH, CorpusPaires, Echantillon, PatchRef
from .erreurs import ErreurConfiguration, ErreurValidation
from .imaging import ImagePlane, image_sans_ombre_apparente, luminance

logger = logging.getLogger(__name__)

CANAUX_ENTREE = 6
DIM_DESCRIPTEUR = 256

# Correspondance type de paire -> indice de classe
TYPE_VERS_INDICE = {-1: 0, 0: 1, 1: 2}
INDICE_VERS_TYPE = {v: k for k, v in TYPE_VERS_INDICE.items()}
INDICE_OMBRE_VERS_LUMIERE = TYPE_VERS_INDICE[1]

CONSTANTES_CPM = {
    "taille_patch": TAILLE_PATCH,
    "canaux_entree": CANAUX_ENTREE,
    "dim_descripteur": DIM_DESCRIPTEUR,
    "fusion_tetes": "concatenation 2x256 -> 512",
    "sortie_correlation": "logistique",
    "indices_types": {str(k): v for k, v in TYPE_VERS_INDICE.items()},
}

STRATEGIES_REQUETES = ("luminance", "ancres")
RATIO_LUMINANCE = 0.8


# =========================================================================
#  ENTREES
# =========================================================================

def entree_cpm(img: ImagePlane, sans_ombre: ImagePlane | None = None,
               kernel: int = 3) -> torch.Tensor:
    """Empile RGB ombre et RGB sans ombre apparente : tenseur 6 x H x W."""
    if sans_ombre is None:
        sans_ombre = image_sans_ombre_apparente(img, kernel)
    data = np.concatenate([img.data, sans_ombre.data], axis=-1)
    return torch.from_numpy(data.transpose(2, 0, 1).copy()).float()


def decouper_patchs(entree: torch.Tensor, patchs: list[PatchRef]) -> torch.Tensor:
    """Extrait les patchs d'un tenseur C x H x W : N x C x 32 x 32."""
    return torch.stack([entree[:, p.ligne:p.ligne + p.taille, p.colonne:p.colonne + p.taille]
                        for p in patchs])


class DatasetPaires(Dataset):
    """Paires du corpus pretes pour l'entrainement du CPM.

    Chaque element est ``(x1, x2, indice_type, correlation)``. Pour une
    paire voie 1, ``x2`` est lu dans l'image sans ombre.
    """

    def __init__(self, corpus: CorpusPaires, echantillons: list[Echantillon]):
        self.paires = corpus.paires
        self._ombre = {e.image_id: entree_cpm(e.ombre) for e in echantillons}
        self._libre = {e.image_id: entree_cpm(e.sans_ombre) for e in echantillons}

    def __len__(self):
        return len(self.paires)

    def __getitem__(self, i):
        p = self.paires[i]
        src1 = self._ombre[p.first.image_id]
        src2 = self._libre[p.second.image_id] if p.voie1 else self._ombre[p.second.image_id]
        x1 = decouper_patchs(src1, [p.first])[0]
        x2 = decouper_patchs(src2, [p.second])[0]
        return (x1, x2,
                torch.tensor(TYPE_VERS_INDICE[p.label.type]),
                torch.tensor(p.label.correlation, dtype=torch.float32))


# =========================================================================
#  RESEAU
# =========================================================================

class BlocResiduel(nn.Module):
    """Deux convolutions 3x3 avec connexion residuelle."""

    def __init__(self, canaux: int):
        super().__init__()
        self.conv1 = nn.Conv2d(canaux, canaux, 3, padding=1)
        self.conv2 = nn.Conv2d(canaux, canaux, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


def _conv(entree: int, sortie: int, pas: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(entree, sortie, 3, stride=pas, padding=1), nn.ReLU(inplace=True))


class ExtracteurPatchs(nn.Module):
    """Extracteur partage : 32x32x6 -> 16x16x64 -> 8x8x96 -> 4x4x96 -> 4x4x64 -> 256."""

    def __init__(self):
        super().__init__()
        self.etages = nn.ModuleList([
            nn.Sequential(_conv(CANAUX_ENTREE, 64, 2), BlocResiduel(64)),
            nn.Sequential(_conv(64, 96, 2), BlocResiduel(96)),
            nn.Sequential(_conv(96, 96, 2), BlocResiduel(96)),
            _conv(96, 64, 1),
        ])
        self.goulot = nn.Linear(4 * 4 * 64, DIM_DESCRIPTEUR)

    def forward(self, x):
        for etage in self.etages:
            x = etage(x)
        return self.goulot(x.flatten(1))

    def formes_intermediaires(self, x) -> list[tuple[int, int, int]]:
        """Formes (H, W, C) apres chaque etage puis (dim,) du goulot."""
        formes = []
        for etage in self.etages:
            x = etage(x)
            formes.append((x.shape[2], x.shape[3], x.shape[1]))
        formes.append((self.goulot(x.flatten(1)).shape[1],))
        return formes


class TetePaire(nn.Module):
    """FC 512 -> 256 -> 128 -> ``sorties`` sur la concatenation des descripteurs."""

    def __init__(self, sorties: int):
        super().__init__()
        self.couches = nn.Sequential(
            nn.Linear(2 * DIM_DESCRIPTEUR, 256), nn.ReLU(inplace=True),
            nn.Linear(256, 128), nn.ReLU(inplace=True),
            nn.Linear(128, sorties),
        )

    def forward(self, f1, f2):
        return self.couches(torch.cat([f1, f2], dim=1))


@dataclass
class CpmPrediction:
    """Sortie du CPM pour un lot de paires.

    Attributes:
        type_probs: N x 3, indices 0/1/2 pour les types -1/0/+1.
        score: N, degre de correlation dans [0, 1].
    """
    type_probs: torch.Tensor
    score: torch.Tensor


class CpmNet(nn.Module):
    """Reseau d'appariement contextuel a deux tetes.

    Attributes:
        compteur_extractions: Nombre de patchs passes dans l'extracteur
            depuis la creation (ou la derniere remise a zero).
    """

    def __init__(self):
        super().__init__()
        self.extracteur = ExtracteurPatchs()
        self.tete_type = TetePaire(3)
        self.tete_correlation = TetePaire(1)
        self.compteur_extractions = 0

    def extract_patch_features(self, patchs: torch.Tensor) -> torch.Tensor:
        """Descripteurs 256-d d'un lot N x 6 x 32 x 32.

        Raises:
            ErreurValidation: Si la forme du lot est incorrecte.
        """
        if patchs.dim() == 3:
            patchs = patchs.unsqueeze(0)
        if patchs.dim() != 4 or tuple(patchs.shape[1:]) != (CANAUX_ENTREE, TAILLE_PATCH, TAILLE_PATCH):
            raise ErreurValidation(
                f"Lot de patchs invalide: {tuple(patchs.shape)} (attendu N x 6 x 32 x 32)")
        self.compteur_extractions += patchs.shape[0]
        return self.extracteur(patchs)

    def logits(self, f1, f2) -> tuple[torch.Tensor, torch.Tensor]:
        """Sorties des tetes avant softmax / logistique : (N x 3, N)."""
        return self.tete_type(f1, f2), self.tete_correlation(f1, f2).squeeze(1)

    def classify_pair(self, f1, f2) -> torch.Tensor:
        """Probabilites de type, N x 3."""
        return F.softmax(self.tete_type(f1, f2), dim=1)

    def regress_correlation(self, f1, f2) -> torch.Tensor:
        """Degre de correlation dans [0, 1], N."""
        return torch.sigmoid(self.tete_correlation(f1, f2).squeeze(1))

    def predire(self, f1, f2) -> CpmPrediction:
        return CpmPrediction(self.classify_pair(f1, f2), self.regress_correlation(f1, f2))

    def forward(self, x1, x2):
        return self.logits(self.extract_patch_features(x1), self.extract_patch_features(x2))


# =========================================================================
#  PERTE
# =========================================================================

@dataclass
class ComposantesCpm:
    total: torch.Tensor
    reg: torch.Tensor
    cls: torch.Tensor


def cpm_loss(logits_type: torch.Tensor, logit_score: torch.Tensor,
             type_cible: torch.Tensor, correlation_cible: torch.Tensor,
             carre: bool = False) -> ComposantesCpm:
    """Perte du CPM : regression + entropie croisee, moyennees sur le lot.

    Args:
        logits_type: N x 3, sorties de la tete de type avant softmax.
        logit_score: N, sortie de la tete de correlation avant logistique.
        type_cible: N indices de classe (voir ``TYPE_VERS_INDICE``).
        correlation_cible: N degres cibles dans [0, 1].
        carre: Residu de regression au carre au lieu de sa valeur absolue.

    Returns:
        ``ComposantesCpm`` (total, reg, cls).
    """
    residu = torch.sigmoid(logit_score) - correlation_cible.to(logit_score.dtype)
    reg = (residu ** 2).mean() if carre else residu.abs().mean()
    cls = F.nll_loss(F.log_softmax(logits_type, dim=1), type_cible.long())
    return ComposantesCpm(reg + cls, reg, cls)


# =========================================================================
#  ENSEMBLE DE CORRESPONDANCES
# =========================================================================

@dataclass(frozen=True)
class Correspondance:
    source: PatchRef
    score: float


@dataclass
class MatchSet:
    """Correspondances ordonnees par patch requete (ombre).

    Attributes:
        requetes: Patch requete -> correspondances hors ombre, scores
            decroissants, sources distinctes.
    """
    requetes: dict[PatchRef, list[Correspondance]] = field(default_factory=dict)

    def __post_init__(self):
        for q, corr in self.requetes.items():
            scores = [c.score for c in corr]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ErreurValidation(f"Scores non decroissants pour {q}")
            if len({c.source for c in corr}) != len(corr):
                raise ErreurValidation(f"Sources dupliquees pour {q}")

    @property
    def est_vide(self) -> bool:
        return not any(self.requetes.values())

    def __len__(self):
        return len(self.requetes)

    def vers_dict(self) -> dict:
        return {"requetes": [
            {"ligne": q.ligne, "colonne": q.colonne, "taille": q.taille,
             "correspondances": [{"ligne": c.source.ligne, "colonne": c.source.colonne,
                                  "score": c.score} for c in corr]}
            for q, corr in sorted(self.requetes.items(), key=lambda kv: (kv[0].ligne, kv[0].colonne))
        ]}

    @classmethod
    def depuis_dict(cls, d: dict, image_id: int = 0) -> "MatchSet":
        requetes = {}
        for r in d.get("requetes", []):
            t = r.get("taille", TAILLE_PATCH)
            q = PatchRef(image_id, r["ligne"], r["colonne"], t)
            requetes[q] = [Correspondance(PatchRef(image_id, c["ligne"], c["colonne"], t), c["score"])
                           for c in r["correspondances"]]
        return cls(requetes)

    def ecrire_json(self, chemin: str | Path):
        Path(chemin).write_text(json.dumps(self.vers_dict(), indent=2), encoding="utf-8")

    @classmethod
    def lire_json(cls, chemin: str | Path) -> "MatchSet":
        return cls.depuis_dict(json.loads(Path(chemin).read_text(encoding="utf-8")))


# =========================================================================
#  INFERENCE SUR IMAGE
# =========================================================================

def grille_patchs(hauteur: int, largeur: int, pas: int, image_id: int = 0,
                  taille: int = TAILLE_PATCH) -> list[PatchRef]:
    """Positions de la grille, ordre ligne puis colonne."""
    if hauteur < taille or largeur < taille:
        raise ErreurValidation(f"Image {hauteur}x{largeur} plus petite que {taille}px")
    if pas < 1:
        raise ErreurConfiguration(f"Pas de grille invalide: {pas}")
    return [PatchRef(image_id, r, c, taille)
            for r in range(0, hauteur - taille + 1, pas)
            for c in range(0, largeur - taille + 1, pas)]


def classer_patchs_luminance(img: ImagePlane, patchs: list[PatchRef],
                             ratio: float = RATIO_LUMINANCE) -> np.ndarray:
    """Patch classe ombre si sa luminance moyenne < ``ratio`` x mediane de l'image."""
    lum = luminance(img).data
    seuil = ratio * np.median(lum)
    return np.array([p.extraire(lum).mean() < seuil for p in patchs], dtype=bool)


@torch.no_grad()
def classer_patchs_ancres(modele: CpmNet, descripteurs: torch.Tensor,
                          moyennes_l: np.ndarray, n_ancres: int = 4) -> np.ndarray:
    """Vote du classifieur contre les patchs les plus lumineux (ancres hors ombre)."""
    n_ancres = min(n_ancres, len(moyennes_l))
    ancres = np.argsort(-moyennes_l, kind="stable")[:n_ancres]
    fa = descripteurs[torch.from_numpy(ancres.copy())]
    ombre = np.zeros(len(moyennes_l), dtype=bool)
    for i in range(len(moyennes_l)):
        f1 = descripteurs[i:i + 1].expand(n_ancres, -1)
        probs = modele.classify_pair(f1, fa).mean(dim=0)
        ombre[i] = int(probs.argmax()) == INDICE_OMBRE_VERS_LUMIERE
    ombre[ancres] = False
    return ombre


@torch.no_grad()
def match_image(modele: CpmNet, shadow_img: ImagePlane,
                unaware_img: ImagePlane | None = None,
                grid_stride: int = 16, k_candidates: int = 8,
                score_floor: float = 0.5, strategie: str = "luminance",
                image_id: int = 0, taille_lot: int = 512) -> MatchSet:
    """Appariement de toute une image en deux phases.

    Phase 1 : un descripteur par patch de la grille. Phase 2 : classement
    ombre / hors ombre des patchs, puis evaluation des paires
    (ombre, hors ombre) ; une paire est retenue si le type +1 a une
    probabilite > 0.5 et un score >= ``score_floor``. Les correspondances
    sont triees par score decroissant puis (ligne, colonne) de la source,
    et tronquees a ``k_candidates``.

    Args:
        modele: CPM entraine (passe en mode evaluation).
        shadow_img: Image ombree RGB, au moins 32x32.
        unaware_img: Image sans ombre apparente (calculee si absente).
        grid_stride: Pas de la grille en pixels.
        k_candidates: Nombre maximal de correspondances par requete.
        score_floor: Score minimal retenu.
        strategie: ``"luminance"`` (seuil sur L moyen) ou ``"ancres"``.
        image_id: Identifiant porte par les ``PatchRef``.
        taille_lot: Taille des lots de paires en phase 2.

    Returns:
        ``MatchSet``, vide si aucun patch d'ombre n'est detecte.
    """
    if strategie not in STRATEGIES_REQUETES:
        raise ErreurConfiguration(f"Strategie de requetes inconnue: {strategie}")
    modele.eval()
    patchs = grille_patchs(shadow_img.hauteur, shadow_img.largeur, grid_stride, image_id)
    entree = entree_cpm(shadow_img, unaware_img)

    # Phase 1
    lots = [modele.extract_patch_features(decouper_patchs(entree, patchs[i:i + taille_lot]))
            for i in range(0, len(patchs), taille_lot)]
    descripteurs = torch.cat(lots)

    if strategie == "luminance":
        ombre = classer_patchs_luminance(shadow_img, patchs)
    else:
        lum = luminance(shadow_img).data
        moyennes = np.array([p.extraire(lum).mean() for p in patchs])
        ombre = classer_patchs_ancres(modele, descripteurs, moyennes)

    requetes_idx = np.flatnonzero(ombre)
    sources_idx = np.flatnonzero(~ombre)
    if len(requetes_idx) == 0 or len(sources_idx) == 0:
        logger.debug("Aucune paire ombre/hors ombre candidate")
        return MatchSet()

    # Phase 2
    fs = descripteurs[torch.from_numpy(sources_idx)]
    requetes: dict[PatchRef, list[Correspondance]] = {}
    for qi in requetes_idx:
        retenues = []
        for debut in range(0, len(sources_idx), taille_lot):
            f2 = fs[debut:debut + taille_lot]
            f1 = descripteurs[qi:qi + 1].expand(f2.shape[0], -1)
            pred = modele.predire(f1, f2)
            garde = (pred.type_probs[:, INDICE_OMBRE_VERS_LUMIERE] > 0.5) & (pred.score >= score_floor)
            for j in torch.nonzero(garde).flatten().tolist():
                retenues.append(Correspondance(patchs[sources_idx[debut + j]], float(pred.score[j])))
        retenues.sort(key=lambda c: (-c.score, c.source.ligne, c.source.colonne))
        requetes[patchs[qi]] = retenues[:k_candidates]

    ms = MatchSet(requetes)
    logger.debug("MatchSet: %d requetes, %d correspondances", len(ms),
                 sum(len(c) for c in ms.requetes.values()))
    return ms
