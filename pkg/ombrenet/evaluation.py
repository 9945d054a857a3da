"""Evaluation : RMSE LAB par region, ecarts par canal, rapports et video.

Les erreurs sont calculees en LAB (D65) sur trois regions : ombre (S),
hors ombre (N) et image entiere (A). Une region vide est absente
(``None``), jamais nulle.

Agregation sur un jeu :
    - ``"image"`` (defaut) : moyenne des valeurs par image ;
    - ``"pixel"`` : erreurs de tous les pixels mises en commun.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from .datasets import Echantillon
from .erreurs import ErreurConfiguration, ErreurValidation
from .imaging import EXTENSIONS_IMAGE, EspaceCouleur, ImagePlane, load_image, rgb_to_lab, save_image

logger = logging.getLogger(__name__)

METRIQUES = ("rmse", "mae")
AGREGATIONS = ("image", "pixel")
VERSION_RAPPORT = 1
REGIONS = ("shadow", "non_shadow", "all")
CHEMIN_SCHEMA = Path(__file__).parent / "resources" / "rapport_schema.json"


# =========================================================================
#  METRIQUES
# =========================================================================

@dataclass(frozen=True)
class RegionRmse:
    """Erreur par region et nombre de pixels de chaque region."""
    shadow: float | None
    non_shadow: float | None
    all: float
    n_shadow: int
    n_non_shadow: int
    n_all: int

    def vers_dict(self) -> dict:
        return asdict(self)


def _lab(img: ImagePlane) -> np.ndarray:
    return img.data if img.espace == EspaceCouleur.LAB else rgb_to_lab(img).data


def _erreurs(pred: ImagePlane, gt: ImagePlane, mask: np.ndarray, metrique: str) -> dict:
    """Somme des erreurs (carres ou valeurs absolues) et pixels par region."""
    if metrique not in METRIQUES:
        raise ErreurConfiguration(f"Metrique inconnue: {metrique} (attendu {METRIQUES})")
    forme = (gt.hauteur, gt.largeur)
    if (pred.hauteur, pred.largeur) != forme:
        raise ErreurValidation(f"Tailles differentes: {(pred.hauteur, pred.largeur)} / {forme}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != forme:
        raise ErreurValidation(f"Masque de taille {mask.shape} pour une image {forme}")
    diff = _lab(pred) - _lab(gt)
    err = (diff ** 2 if metrique == "rmse" else np.abs(diff)).sum(axis=-1)
    return {
        "shadow": (float(err[mask].sum()), int(mask.sum())),
        "non_shadow": (float(err[~mask].sum()), int((~mask).sum())),
        "all": (float(err.sum()), int(mask.size)),
    }


def _region(somme: float, n: int, metrique: str) -> float | None:
    if n == 0:
        return None
    moyenne = somme / (3 * n)
    return math.sqrt(moyenne) if metrique == "rmse" else moyenne


def rmse_lab(pred: ImagePlane, gt: ImagePlane, mask: np.ndarray,
             metrique: str = "rmse") -> RegionRmse:
    """Erreur LAB par region : racine de la moyenne (pixels x 3 canaux) des carres.

    Args:
        pred: Image produite (RGB ou LAB).
        gt: Verite terrain (RGB ou LAB).
        mask: Masque d'ombre booleen H x W.
        metrique: ``"rmse"`` ou ``"mae"`` (moyenne des valeurs absolues).

    Raises:
        ErreurValidation: Tailles differentes.
    """
    return _depuis_erreurs(_erreurs(pred, gt, mask, metrique), metrique)


def _depuis_erreurs(e: dict, metrique: str) -> RegionRmse:
    return RegionRmse(
        _region(*e["shadow"], metrique), _region(*e["non_shadow"], metrique),
        _region(*e["all"], metrique),
        e["shadow"][1], e["non_shadow"][1], e["all"][1],
    )


@dataclass(frozen=True)
class ChannelGapStats:
    """Ecart absolu moyen L, A, B entre image ombree et verite terrain dans l'ombre."""
    l: float
    a: float
    b: float
    n_images: int

    def vers_dict(self) -> dict:
        return asdict(self)


def channel_gap_stats(echantillons: list[Echantillon]) -> ChannelGapStats:
    """Moyenne sur le jeu des ecarts par canal dans les zones d'ombre.

    Les images sans pixel d'ombre ne comptent pas.

    Raises:
        ErreurValidation: Aucun pixel d'ombre dans tout le jeu.
    """
    ecarts = []
    for e in echantillons:
        if not e.masque.any():
            continue
        diff = np.abs(_lab(e.ombre) - _lab(e.sans_ombre))[e.masque]
        ecarts.append(diff.mean(axis=0))
    if not ecarts:
        raise ErreurValidation("Aucun pixel d'ombre dans le jeu de donnees")
    m = np.mean(ecarts, axis=0)
    return ChannelGapStats(float(m[0]), float(m[1]), float(m[2]), len(ecarts))


# =========================================================================
#  RAPPORTS
# =========================================================================

@dataclass
class RapportEvaluation:
    """Resultats d'une variante sur un jeu.

    Attributes:
        variante: Variante evaluee.
        metrique: ``"rmse"`` ou ``"mae"``.
        agregation: ``"image"`` ou ``"pixel"``.
        images: Nom de chaque image et ses ``RegionRmse``.
        agregat: Valeurs S / N / A agregees.
    """
    variante: str
    metrique: str
    agregation: str
    images: list[tuple[str, RegionRmse]] = field(default_factory=list)
    agregat: dict = field(default_factory=dict)

    def vers_dict(self) -> dict:
        return {
            "version": VERSION_RAPPORT,
            "variante": self.variante,
            "metrique": self.metrique,
            "agregation": self.agregation,
            "agregat": self.agregat,
            "images": [{"nom": nom, **r.vers_dict()} for nom, r in self.images],
        }

    def ecrire_json(self, chemin: str | Path) -> Path:
        d = self.vers_dict()
        valider_rapport(d)
        chemin = Path(chemin)
        chemin.parent.mkdir(parents=True, exist_ok=True)
        chemin.write_text(json.dumps(d, indent=2), encoding="utf-8")
        return chemin

    def table_texte(self) -> str:
        lignes = [(nom, r.shadow, r.non_shadow, r.all) for nom, r in self.images]
        lignes.append(("moyenne" if self.agregation == "image" else "global",
                       self.agregat.get("shadow"), self.agregat.get("non_shadow"),
                       self.agregat.get("all")))
        return _table(["Image", "S", "N", "A"], lignes)


def _cellule(v) -> str:
    if v is None:
        return "-"
    return f"{v:.2f}" if isinstance(v, float) else str(v)


def _table(entetes: list[str], lignes: list[tuple]) -> str:
    cellules = [entetes] + [[_cellule(v) for v in ligne] for ligne in lignes]
    largeurs = [max(len(c[i]) for c in cellules) for i in range(len(entetes))]
    texte = []
    for j, c in enumerate(cellules):
        texte.append("  ".join(v.ljust(largeurs[0]) if i == 0 else v.rjust(largeurs[i])
                               for i, v in enumerate(c)))
        if j == 0:
            texte.append("  ".join("-" * lg for lg in largeurs))
    return "\n".join(texte)


def schema_rapport() -> dict:
    return json.loads(CHEMIN_SCHEMA.read_text(encoding="utf-8"))


def valider_rapport(d: dict):
    """Valide un rapport contre le schema JSON embarque.

    Raises:
        ErreurValidation: Rapport non conforme.
    """
    try:
        jsonschema.validate(d, schema_rapport())
    except jsonschema.ValidationError as e:
        raise ErreurValidation(f"Rapport non conforme au schema: {e.message}") from e


def _agreger(resultats: list[RegionRmse], sommes: list[dict], agregation: str, metrique: str) -> dict:
    if agregation == "image":
        agregat = {}
        for region in REGIONS:
            valeurs = [getattr(r, region) for r in resultats if getattr(r, region) is not None]
            agregat[region] = float(np.mean(valeurs)) if valeurs else None
        return agregat
    return {region: _region(sum(s[region][0] for s in sommes), sum(s[region][1] for s in sommes), metrique)
            for region in REGIONS}


Predicteur = Callable[[ImagePlane], ImagePlane]


def _predicteur(modele) -> Predicteur:
    return modele.supprimer if hasattr(modele, "supprimer") else modele


def evaluate(modele, echantillons: list[Echantillon], variante: str = "full",
             metrique: str = "rmse", agregation: str = "image",
             noms: list[str] | None = None) -> RapportEvaluation:
    """Evalue un pipeline (ou toute fonction image -> image) sur un jeu.

    Args:
        modele: ``PipelineOmbre`` ou fonction ``ImagePlane -> ImagePlane``.
        echantillons: Images ombrees, verites terrain et masques.
        variante: Nom reporte dans le rapport.
        metrique: ``"rmse"`` ou ``"mae"``.
        agregation: ``"image"`` ou ``"pixel"``.
        noms: Nom de chaque image (defaut : nom de fichier ou indice).
    """
    if agregation not in AGREGATIONS:
        raise ErreurConfiguration(f"Agregation inconnue: {agregation} (attendu {AGREGATIONS})")
    if not echantillons:
        raise ErreurValidation("Aucune image a evaluer")
    predire = _predicteur(modele)
    resultats, sommes, lignes = [], [], []
    for i, e in enumerate(echantillons):
        pred = predire(e.ombre)
        s = _erreurs(pred, e.sans_ombre, e.masque, metrique)
        r = _depuis_erreurs(s, metrique)
        resultats.append(r)
        sommes.append(s)
        if noms is not None:
            nom = noms[i]
        elif e.record is not None:
            nom = e.record.shadow_img_path.name
        else:
            nom = f"image_{e.image_id:03d}"
        lignes.append((nom, r))
    rapport = RapportEvaluation(variante, metrique, agregation, lignes,
                                _agreger(resultats, sommes, agregation, metrique))
    logger.info("Evaluation %s: A=%s", variante, _cellule(rapport.agregat["all"]))
    return rapport


def evaluer_point_controle(chemin: str | Path, echantillons: list[Echantillon],
                           variante: str | None = None, cfg=None, **options) -> RapportEvaluation:
    """Charge un point de controle CANet et l'evalue (variante verifiee)."""
    from .points_controle import charger_pipeline

    pipeline = charger_pipeline(chemin, variante, cfg)
    return evaluate(pipeline, echantillons, pipeline.variante.value, **options)


def table_ablation(rapports: list[RapportEvaluation]) -> str:
    """Une ligne S / N / A par variante."""
    return _table(["Variante", "S", "N", "A"],
                  [(r.variante, r.agregat.get("shadow"), r.agregat.get("non_shadow"),
                    r.agregat.get("all")) for r in rapports])


def ablation(modeles: dict[str, object], echantillons: list[Echantillon], **options) -> list[RapportEvaluation]:
    """Evalue plusieurs variantes sur le meme jeu, dans l'ordre du dictionnaire."""
    return [evaluate(m, echantillons, nom, **options) for nom, m in modeles.items()]


# =========================================================================
#  VIDEO (SEQUENCE D'IMAGES)
# =========================================================================

def lister_images(dossier: str | Path) -> list[Path]:
    dossier = Path(dossier)
    if not dossier.is_dir():
        raise ErreurValidation(f"Dossier introuvable: {dossier}")
    return sorted(p for p in dossier.iterdir() if p.suffix.lower() in EXTENSIONS_IMAGE)


def traiter_video(modele, dossier_entree: str | Path, dossier_sortie: str | Path,
                  workers: int = 1) -> list[Path]:
    """Supprime les ombres image par image d'une sequence.

    Chaque image est traitee independamment ; les sorties gardent le nom
    (et donc l'ordre) des entrees, au format PNG.

    Returns:
        Chemins ecrits, dans l'ordre des images d'entree.
    """
    images = lister_images(dossier_entree)
    if not images:
        raise ErreurValidation(f"Aucune image dans {dossier_entree}")
    sortie = Path(dossier_sortie)
    sortie.mkdir(parents=True, exist_ok=True)
    predire = _predicteur(modele)

    def traiter(chemin: Path) -> Path:
        cible = sortie / f"{chemin.stem}.png"
        save_image(predire(load_image(chemin)), cible)
        return cible

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        ecrits = list(pool.map(traiter, images))
    logger.info("Video: %d images traitees", len(ecrits))
    return ecrits
