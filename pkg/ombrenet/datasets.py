"""Jeux de donnees : ingestion ISTD/SRD, patchs 32x32 et corpus de paires.

Ce module fournit :
    - ``ingest_dataset`` : lecture d'un dossier ISTD (triplets) ou SRD
      (paires + dossier de masques externe), ordre lexicographique.
    - Les etiquettes de verite terrain d'une paire de patchs : type
      (-1, 0, +1) depuis le masque, degre de correlation (0 / 1) depuis la
      similarite cosinus sur l'image sans ombre.
    - ``build_pair_corpus`` : corpus equilibre 50/50 correspondances /
      non-correspondances, reproductible depuis une graine.
    - L'ecriture / lecture du corpus : une ligne d'en-tete JSON terminee par
      ``\\n`` puis des enregistrements binaires petit-boutistes
      ``{image_id: u32, l1, c1, l2, c2: u16, type: i8, corr: u8}``.

Une paire a coordonnees identiques est toujours une paire "voie 1"
(patch de l'image ombree vs meme position dans l'image sans ombre) :
la voie 2 ne tire jamais deux fois la meme position.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .erreurs import ErreurConfiguration, ErreurCorpus, ErreurDecodage, ErreurValidation
from .imaging import (
    EXTENSIONS_IMAGE, ImagePlane, load_image, load_mask,
    redimensionner, redimensionner_masque,
)

logger = logging.getLogger(__name__)

TAILLE_PATCH = 32
TAU_OMBRE = 0.5
SEUIL_CORRESPONDANCE = 0.95
SEUIL_NON_CORRESPONDANCE = 0.6

FORMAT_CORPUS = "ombrenet-corpus"
VERSION_CORPUS = 1
STRUCT_PAIRE = struct.Struct("<IHHHHbB")

# Suffixes des images sans ombre dans la convention SRD
SUFFIXES_SANS_OMBRE = ("", "_no_shadow", "_free")


class Disposition(str, Enum):
    """Convention de rangement d'un jeu de donnees."""
    ISTD = "ISTD"
    SRD = "SRD"


class Partition(str, Enum):
    TRAIN = "train"
    TEST = "test"


# =========================================================================
#  TYPES
# =========================================================================

@dataclass(frozen=True)
class SampleRecord:
    """Triplet (image ombree, image sans ombre, masque) sur disque.

    Attributes:
        shadow_img_path: Image avec ombre.
        shadowfree_img_path: Image de verite terrain sans ombre.
        mask_path: Masque d'ombre (binarise a 0.5).
        split: Partition ``train`` ou ``test``.
    """
    shadow_img_path: Path
    shadowfree_img_path: Path
    mask_path: Path
    split: Partition = Partition.TRAIN


@dataclass
class JeuDonnees:
    """Resultat d'ingestion : enregistrements retenus et compteurs.

    Attributes:
        records: Enregistrements valides, ordre lexicographique par partition.
        ignores: Enregistrements sans masque (avertissements).
        rejetes: Enregistrements aux rasters de tailles differentes.
    """
    records: list[SampleRecord] = field(default_factory=list)
    ignores: int = 0
    rejetes: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def partition(self, split: Partition | str) -> list[SampleRecord]:
        split = Partition(split)
        return [r for r in self.records if r.split == split]


@dataclass(frozen=True)
class PatchRef:
    """Patch carre dans une image, coordonnees du coin haut-gauche en pixels."""
    image_id: int
    ligne: int
    colonne: int
    taille: int = TAILLE_PATCH

    def dans(self, hauteur: int, largeur: int) -> bool:
        """Vrai si le patch est entierement dans une image H x W."""
        return (0 <= self.ligne and 0 <= self.colonne
                and self.ligne + self.taille <= hauteur
                and self.colonne + self.taille <= largeur)

    def extraire(self, raster: np.ndarray) -> np.ndarray:
        """Vue sur la region du patch (les axes suivants sont conserves)."""
        if not self.dans(raster.shape[0], raster.shape[1]):
            raise ErreurValidation(f"Patch hors image: {self} sur {raster.shape[:2]}")
        return raster[self.ligne:self.ligne + self.taille,
                      self.colonne:self.colonne + self.taille]

    def coller(self, raster: np.ndarray, region: np.ndarray) -> np.ndarray:
        """Copie de ``raster`` ou la region du patch est remplacee."""
        sortie = raster.copy()
        sortie[self.ligne:self.ligne + self.taille,
               self.colonne:self.colonne + self.taille] = region
        return sortie


@dataclass(frozen=True)
class PairLabel:
    """Etiquette d'une paire : type (-1, 0, +1) et degre de correlation."""
    type: int
    correlation: float

    def __post_init__(self):
        if self.type not in (-1, 0, 1):
            raise ErreurValidation(f"Type de paire invalide: {self.type}")
        if not 0.0 <= self.correlation <= 1.0:
            raise ErreurValidation(f"Correlation hors de [0, 1]: {self.correlation}")


@dataclass(frozen=True)
class PatchPair:
    first: PatchRef
    second: PatchRef
    label: PairLabel

    @property
    def voie1(self) -> bool:
        """Paire image ombree / image sans ombre a la meme position."""
        return (self.first.ligne, self.first.colonne) == (self.second.ligne, self.second.colonne)


@dataclass
class Echantillon:
    """Rasters charges en memoire pour un enregistrement.

    Attributes:
        image_id: Indice de l'image dans le jeu.
        ombre: Image avec ombre (RGB).
        sans_ombre: Verite terrain sans ombre (RGB).
        masque: Masque d'ombre booleen H x W.
        record: Enregistrement source, ``None`` pour les fixtures en memoire.
    """
    image_id: int
    ombre: ImagePlane
    sans_ombre: ImagePlane
    masque: np.ndarray
    record: SampleRecord | None = None

    def __post_init__(self):
        forme = (self.ombre.hauteur, self.ombre.largeur)
        if (self.sans_ombre.hauteur, self.sans_ombre.largeur) != forme or self.masque.shape != forme:
            raise ErreurValidation(f"Tailles incoherentes pour l'image {self.image_id}")
        self.masque = np.asarray(self.masque, dtype=bool)


@dataclass
class CorpusPaires:
    """Corpus de paires etiquetees et son en-tete."""
    paires: list[PatchPair]
    entete: dict

    def __len__(self):
        return len(self.paires)

    def compter(self) -> tuple[int, int]:
        """Retourne (nombre de correspondances, nombre de non-correspondances)."""
        n1 = sum(1 for p in self.paires if p.label.correlation >= 0.5)
        return n1, len(self.paires) - n1


# =========================================================================
#  INGESTION
# =========================================================================

def _images(dossier: Path) -> list[Path]:
    if not dossier.is_dir():
        return []
    return sorted(p for p in dossier.iterdir() if p.suffix.lower() in EXTENSIONS_IMAGE)


def _trouver(dossier: Path, stem: str, suffixes=("",)) -> Path | None:
    """Cherche ``stem + suffixe`` avec une extension supportee."""
    for suffixe in suffixes:
        for ext in EXTENSIONS_IMAGE:
            for candidat in (dossier / f"{stem}{suffixe}{ext}",
                             dossier / f"{stem}{suffixe}{ext.upper()}"):
                if candidat.exists():
                    return candidat
    return None


def _taille(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as e:
        raise ErreurDecodage(f"Image illisible: {path} ({e})") from e


def _dossiers(root: Path, layout: Disposition, split: str,
              dossier_masques: Path | None) -> tuple[Path, Path, Path]:
    if layout == Disposition.ISTD:
        base = root / split
        return base / f"{split}_A", base / f"{split}_C", base / f"{split}_B"
    masques = (dossier_masques / split) if dossier_masques else (root / split / "mask")
    return root / split / "shadow", root / split / "shadow_free", masques


def ingest_dataset(root_path: str | Path, layout: Disposition | str,
                   dossier_masques: str | Path | None = None,
                   splits=(Partition.TRAIN, Partition.TEST)) -> JeuDonnees:
    """Lit un jeu de donnees ISTD ou SRD.

    Dispositions attendues::

        ISTD : <root>/<split>/<split>_A  (ombre)
               <root>/<split>/<split>_B  (masque)
               <root>/<split>/<split>_C  (sans ombre)
        SRD  : <root>/<split>/shadow, <root>/<split>/shadow_free
               masques dans <dossier_masques>/<split>
               (defaut : <root>/<split>/mask)

    Args:
        root_path: Racine du jeu.
        layout: ``"ISTD"`` ou ``"SRD"``.
        dossier_masques: Racine des masques externes (SRD uniquement).
        splits: Partitions a lire.

    Returns:
        ``JeuDonnees`` avec les enregistrements et les compteurs
        d'avertissement (masque manquant) et de rejet (tailles differentes).

    Raises:
        ErreurValidation: Si la racine n'existe pas.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ErreurValidation(f"Dossier de jeu introuvable: {root}")
    layout = Disposition(layout)
    masques_ext = Path(dossier_masques) if dossier_masques else None
    jeu = JeuDonnees()

    for split in splits:
        split = Partition(split)
        d_ombre, d_libre, d_masque = _dossiers(root, layout, split.value, masques_ext)
        for chemin in _images(d_ombre):
            stem = chemin.stem
            libre = _trouver(d_libre, stem, SUFFIXES_SANS_OMBRE)
            masque = _trouver(d_masque, stem)
            if libre is None:
                logger.warning("Image sans ombre manquante pour %s, ignoree", chemin)
                jeu.ignores += 1
                continue
            if masque is None:
                logger.warning("Masque manquant pour %s, ignore", chemin)
                jeu.ignores += 1
                continue
            tailles = {_taille(chemin), _taille(libre), _taille(masque)}
            if len(tailles) != 1:
                logger.warning("Tailles differentes pour %s: %s, rejete", chemin, sorted(tailles))
                jeu.rejetes += 1
                continue
            jeu.records.append(SampleRecord(chemin, libre, masque, split))

    logger.info("Ingestion %s: %d enregistrements, %d ignores, %d rejetes",
                layout.value, len(jeu.records), jeu.ignores, jeu.rejetes)
    return jeu


def charger_echantillon(record: SampleRecord, image_id: int = 0,
                        taille: tuple[int, int] | None = None) -> Echantillon:
    """Charge les trois rasters d'un enregistrement, redimensionnes si demande."""
    ombre = load_image(record.shadow_img_path)
    libre = load_image(record.shadowfree_img_path)
    masque = load_mask(record.mask_path)
    if taille is not None:
        ombre = redimensionner(ombre, taille)
        libre = redimensionner(libre, taille)
        masque = redimensionner_masque(masque, taille)
    return Echantillon(image_id, ombre, libre, masque, record)


def charger_echantillons(records, taille: tuple[int, int] | None = None,
                         workers: int = 4) -> list[Echantillon]:
    """Charge plusieurs enregistrements en parallele (ordre conserve)."""
    records = list(records)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda ir: charger_echantillon(ir[1], ir[0], taille),
                             enumerate(records)))


# =========================================================================
#  ETIQUETTES DE VERITE TERRAIN
# =========================================================================

def patch_shadow_fraction(patch: PatchRef, mask: np.ndarray) -> float:
    """Fraction de pixels d'ombre dans le patch."""
    return float(np.mean(patch.extraire(np.asarray(mask, dtype=bool))))


def est_ombre(patch: PatchRef, mask: np.ndarray, tau_shadow: float = TAU_OMBRE) -> bool:
    return patch_shadow_fraction(patch, mask) >= tau_shadow


def ground_truth_type(first: PatchRef, second: PatchRef, mask: np.ndarray,
                      tau_shadow: float = TAU_OMBRE) -> int:
    """Type de la paire : +1 (ombre, hors ombre), -1 (hors ombre, ombre), 0 sinon."""
    o1 = est_ombre(first, mask, tau_shadow)
    o2 = est_ombre(second, mask, tau_shadow)
    if o1 == o2:
        return 0
    return 1 if o1 else -1


def type_voie1(patch: PatchRef, mask: np.ndarray, tau_shadow: float = TAU_OMBRE) -> int:
    """Type d'une paire voie 1 : le patch sans ombre compte comme hors ombre."""
    return 1 if est_ombre(patch, mask, tau_shadow) else 0


def similarite_cosinus(a: np.ndarray, b: np.ndarray) -> float | None:
    """Cosinus entre deux tableaux aplatis, ``None`` si l'un est nul."""
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return None
    return float(va @ vb / (na * nb))


def ground_truth_correlation(first: PatchRef, second: PatchRef,
                             shadowfree_img: ImagePlane,
                             seuil_haut: float = SEUIL_CORRESPONDANCE,
                             seuil_bas: float = SEUIL_NON_CORRESPONDANCE) -> int | None:
    """Degre de correlation de verite terrain, ou ``None`` si la paire est ecartee.

    Cosinus sur les patchs RGB aplatis de l'image sans ombre :
    ``> seuil_haut`` donne 1, ``< seuil_bas`` donne 0, l'entre-deux et les
    patchs nuls sont ecartes.
    """
    cos = similarite_cosinus(first.extraire(shadowfree_img.data),
                             second.extraire(shadowfree_img.data))
    if cos is None:
        return None
    if cos > seuil_haut:
        return 1
    if cos < seuil_bas:
        return 0
    return None


# =========================================================================
#  CORPUS DE PAIRES
# =========================================================================

def _tirer_patch(rng: np.random.Generator, image_id: int, h: int, w: int) -> PatchRef:
    return PatchRef(image_id,
                    int(rng.integers(0, h - TAILLE_PATCH + 1)),
                    int(rng.integers(0, w - TAILLE_PATCH + 1)))


def _en_echantillons(items) -> list[Echantillon]:
    items = list(items)
    if items and isinstance(items[0], SampleRecord):
        return charger_echantillons(items)
    return items


def build_pair_corpus(records, n_pairs: int, rng_seed: int,
                      tau_shadow: float = TAU_OMBRE,
                      part_voie1: float = 0.5,
                      max_tentatives: int | None = None) -> CorpusPaires:
    """Construit un corpus equilibre de paires de patchs etiquetees.

    Voie 1 : meme position dans l'image ombree et l'image sans ombre,
    toujours correlation 1. Voie 2 : deux positions distinctes de l'image
    ombree, etiquetees par ``ground_truth_correlation``. Le tirage est
    uniforme, rejete tant que le patch deborde ou que l'etiquette est
    indefinie.

    Args:
        records: ``SampleRecord`` (charges a la volee) ou ``Echantillon``.
        n_pairs: Nombre total de paires, pair.
        rng_seed: Graine ; le corpus est une fonction pure des entrees.
        tau_shadow: Seuil de fraction d'ombre pour classer un patch.
        part_voie1: Probabilite de tirer une paire voie 1 tant que le
            quota de correspondances n'est pas atteint.
        max_tentatives: Borne du tirage (defaut ``200 * n_pairs``).

    Returns:
        ``CorpusPaires`` avec exactement ``n_pairs / 2`` paires de chaque
        correlation.

    Raises:
        ErreurConfiguration: Si ``n_pairs`` est impair ou nul.
        ErreurValidation: Si aucun enregistrement n'est fourni.
        ErreurCorpus: Si le tirage ne trouve pas assez de paires valides.
    """
    if n_pairs <= 0 or n_pairs % 2:
        raise ErreurConfiguration(f"n_pairs doit etre pair et positif: {n_pairs}")
    echantillons = _en_echantillons(records)
    if not echantillons:
        raise ErreurValidation("Aucun enregistrement pour construire le corpus")
    for e in echantillons:
        if e.ombre.hauteur < TAILLE_PATCH or e.ombre.largeur < TAILLE_PATCH:
            raise ErreurValidation(f"Image {e.image_id} plus petite que {TAILLE_PATCH}px")

    rng = np.random.default_rng(rng_seed)
    cible = n_pairs // 2
    max_tentatives = max_tentatives or 200 * n_pairs
    paires: list[PatchPair] = []
    n_corr = n_non = 0
    tentatives = 0

    while (n_corr < cible or n_non < cible) and tentatives < max_tentatives:
        tentatives += 1
        e = echantillons[int(rng.integers(len(echantillons)))]
        h, w = e.ombre.hauteur, e.ombre.largeur

        if n_corr < cible and rng.random() < part_voie1:
            p = _tirer_patch(rng, e.image_id, h, w)
            paires.append(PatchPair(p, p, PairLabel(type_voie1(p, e.masque, tau_shadow), 1.0)))
            n_corr += 1
            continue

        p1 = _tirer_patch(rng, e.image_id, h, w)
        p2 = _tirer_patch(rng, e.image_id, h, w)
        if (p1.ligne, p1.colonne) == (p2.ligne, p2.colonne):
            continue
        corr = ground_truth_correlation(p1, p2, e.sans_ombre)
        if corr is None:
            continue
        if (corr == 1 and n_corr >= cible) or (corr == 0 and n_non >= cible):
            continue
        typ = ground_truth_type(p1, p2, e.masque, tau_shadow)
        paires.append(PatchPair(p1, p2, PairLabel(typ, float(corr))))
        if corr == 1:
            n_corr += 1
        else:
            n_non += 1

    if n_corr < cible or n_non < cible:
        raise ErreurCorpus(
            f"Corpus incomplet apres {tentatives} tirages: {n_corr} correspondances "
            f"et {n_non} non-correspondances trouvees pour {cible} demandees chacune")

    entete = {
        "format": FORMAT_CORPUS,
        "version": VERSION_CORPUS,
        "graine": int(rng_seed),
        "n_paires": len(paires),
        "n_correspondances": n_corr,
        "n_non_correspondances": n_non,
        "taille_patch": TAILLE_PATCH,
        "tau_ombre": tau_shadow,
        "seuil_correspondance": SEUIL_CORRESPONDANCE,
        "seuil_non_correspondance": SEUIL_NON_CORRESPONDANCE,
        "images": [str(e.record.shadow_img_path) if e.record else f"memoire:{e.image_id}"
                   for e in echantillons],
    }
    logger.info("Corpus construit: %d paires en %d tirages", len(paires), tentatives)
    return CorpusPaires(paires, entete)


def ecrire_corpus(corpus: CorpusPaires, chemin: str | Path) -> str:
    """Ecrit le corpus (en-tete JSON + enregistrements binaires).

    Returns:
        Empreinte SHA-256 hexadecimale du fichier ecrit.
    """
    chemin = Path(chemin)
    chemin.parent.mkdir(parents=True, exist_ok=True)
    contenu = bytearray(json.dumps(corpus.entete, sort_keys=True).encode("utf-8") + b"\n")
    for p in corpus.paires:
        contenu += STRUCT_PAIRE.pack(p.first.image_id,
                                     p.first.ligne, p.first.colonne,
                                     p.second.ligne, p.second.colonne,
                                     p.label.type, int(round(p.label.correlation)))
    chemin.write_bytes(bytes(contenu))
    return hashlib.sha256(contenu).hexdigest()


def lire_corpus(chemin: str | Path) -> CorpusPaires:
    """Relit un corpus ecrit par ``ecrire_corpus``.

    Raises:
        ErreurCorpus: Format inconnu ou fichier tronque.
    """
    chemin = Path(chemin)
    try:
        contenu = chemin.read_bytes()
    except OSError as e:
        raise ErreurCorpus(f"Corpus illisible: {chemin} ({e})") from e
    fin = contenu.find(b"\n")
    if fin < 0:
        raise ErreurCorpus(f"En-tete de corpus absent: {chemin}")
    entete = json.loads(contenu[:fin].decode("utf-8"))
    if entete.get("format") != FORMAT_CORPUS:
        raise ErreurCorpus(f"Format de corpus inconnu: {chemin}")
    corps = contenu[fin + 1:]
    if len(corps) % STRUCT_PAIRE.size:
        raise ErreurCorpus(f"Corpus tronque: {chemin}")
    taille = entete.get("taille_patch", TAILLE_PATCH)
    paires = []
    for image_id, l1, c1, l2, c2, typ, corr in STRUCT_PAIRE.iter_unpack(corps):
        paires.append(PatchPair(PatchRef(image_id, l1, c1, taille),
                                PatchRef(image_id, l2, c2, taille),
                                PairLabel(typ, float(corr))))
    return CorpusPaires(paires, entete)


def revalider_corpus(corpus: CorpusPaires, echantillons: list[Echantillon]) -> list[int]:
    """Recalcule chaque etiquette depuis les rasters.

    Returns:
        Indices des paires dont l'etiquette recalculee differe.
    """
    par_id = {e.image_id: e for e in echantillons}
    tau = corpus.entete.get("tau_ombre", TAU_OMBRE)
    ecarts = []
    for i, p in enumerate(corpus.paires):
        e = par_id[p.first.image_id]
        if p.voie1:
            attendu = PairLabel(type_voie1(p.first, e.masque, tau), 1.0)
        else:
            corr = ground_truth_correlation(p.first, p.second, e.sans_ombre)
            if corr is None:
                ecarts.append(i)
                continue
            attendu = PairLabel(ground_truth_type(p.first, p.second, e.masque, tau), float(corr))
        if attendu != p.label:
            ecarts.append(i)
    return ecarts
