"""Configuration d'entrainement et d'evaluation.

``TrainConfig`` regroupe les hyperparametres (valeurs par defaut de la
configuration de reference) et les sous-configurations des reseaux. Un
fichier TOML ou JSON partiel est fusionne sur les valeurs par defaut ;
les surcharges en ligne de commande utilisent des cles pointees
(``cft.k=5``).
"""

from __future__ import annotations

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .canet import EXTRACTEURS, MODES_REM, BackboneConfig, LossWeights, UNetConfig
from .cft import CftConfig
from .datasets import Disposition
from .erreurs import ErreurConfiguration
from .variantes import AblationVariant, MatchConfig

logger = logging.getLogger(__name__)

SOUS_CONFIGS = {
    "loss_weights": LossWeights,
    "cft": CftConfig,
    "backbone": BackboneConfig,
    "unet": UNetConfig,
    "appariement": MatchConfig,
}

# Champs sans effet sur le modele ni l'optimiseur : hors empreinte
HORS_EMPREINTE = frozenset({
    "epochs_cpm", "epochs_canet", "checkpoint_dir", "dataset_root", "dossier_masques",
    "barre_progression", "journal", "cache_matchsets", "workers",
})


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparametres et options du pipeline.

    Attributes:
        lr: Taux d'apprentissage initial (Adam, sans planificateur).
        betas: Moments d'Adam.
        weight_decay: Decroissance des poids.
        batch_size: Taille de lot CANet.
        batch_cpm: Taille de lot des paires CPM.
        epochs_cpm: Epoques du CPM.
        epochs_canet: Epoques de CANet.
        input_size: (H, W) des images d'entrainement.
        seed: Graine unique de tous les tirages.
        n_paires: Taille du corpus de paires.
        part_validation: Fraction du corpus gardee pour la validation CPM.
        variant: Variante d'ablation.
        carre_reg: Residu de regression CPM au carre.
        mode_rem: ``"norme"`` (defaut) ou ``"mse"`` pour L_rem.
        etape_un_dans_rem: L_rem inclut l'ecart LAB de l'etape 1.
        extracteur: Reseau perceptuel (``"aleatoire"`` ou ``"vgg19"``).
        niveaux_cft: Niveaux transferes (``None`` : les deux plus grossiers).
        decodeurs_separes: Un decodeur par branche L / AB.
        cft_branches: Branches qui recoivent le CFT.
        cpm_conjoint: Une epoque CPM apres chaque epoque CANet.
        layout: Convention du jeu de donnees.
        dataset_root: Racine du jeu de donnees.
        dossier_masques: Dossier des masques (SRD).
        checkpoint_dir: Dossier des points de controle.
        journal: Fichier JSON-lines (defaut ``checkpoint_dir/journal.jsonl``).
        cache_matchsets: Fichier SQLite du cache, ou ``":memory:"``.
        workers: Threads de chargement.
        barre_progression: Affiche les barres tqdm.
    """
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-4
    batch_size: int = 2
    batch_cpm: int = 64
    epochs_cpm: int = 30
    epochs_canet: int = 50
    input_size: tuple[int, int] = (400, 400)
    seed: int = 0
    n_paires: int = 20000
    part_validation: float = 0.1
    variant: str = AblationVariant.FULL.value
    loss_weights: LossWeights = field(default_factory=LossWeights)
    cft: CftConfig = field(default_factory=CftConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    appariement: MatchConfig = field(default_factory=MatchConfig)
    carre_reg: bool = False
    mode_rem: str = "norme"
    etape_un_dans_rem: bool = True
    extracteur: str = "aleatoire"
    niveaux_cft: tuple[int, ...] | None = None
    decodeurs_separes: bool = False
    cft_branches: tuple[str, ...] = ("L", "AB")
    cpm_conjoint: bool = False
    layout: str = Disposition.ISTD.value
    dataset_root: str = ""
    dossier_masques: str | None = None
    checkpoint_dir: str = "checkpoints"
    journal: str | None = None
    cache_matchsets: str = ":memory:"
    workers: int = 0
    barre_progression: bool = True

    def __post_init__(self):
        AblationVariant.depuis(self.variant)
        try:
            Disposition(self.layout)
        except ValueError:
            raise ErreurConfiguration(f"Convention de jeu inconnue: {self.layout}") from None
        if self.lr <= 0 or self.batch_size < 1 or self.batch_cpm < 1:
            raise ErreurConfiguration("lr, batch_size et batch_cpm doivent etre positifs")
        if min(self.input_size) < 32:
            raise ErreurConfiguration(f"input_size trop petit: {self.input_size}")
        if self.n_paires <= 0 or self.n_paires % 2:
            raise ErreurConfiguration(f"n_paires doit etre pair et positif: {self.n_paires}")
        if not 0.0 <= self.part_validation < 1.0:
            raise ErreurConfiguration(f"part_validation hors de [0, 1): {self.part_validation}")
        if self.mode_rem not in MODES_REM:
            raise ErreurConfiguration(f"mode_rem inconnu: {self.mode_rem}")
        if self.extracteur not in EXTRACTEURS:
            raise ErreurConfiguration(f"Extracteur inconnu: {self.extracteur}")

    @property
    def variante(self) -> AblationVariant:
        return AblationVariant(self.variant)

    @property
    def options_etape_un(self) -> dict:
        return {"niveaux_cft": self.niveaux_cft, "decodeurs_separes": self.decodeurs_separes,
                "cft_branches": self.cft_branches}

    @classmethod
    def bureau(cls, **surcharges) -> "TrainConfig":
        """Profil de bureau : images 64x64, reseaux etroits, epoques courtes."""
        base = cls(
            lr=1e-3,
            batch_cpm=32,
            epochs_cpm=20,
            epochs_canet=20,
            input_size=(64, 64),
            n_paires=256,
            backbone=BackboneConfig(largeurs=(16, 32, 64), croissance=8, couches_dense=2),
            unet=UNetConfig(largeurs=(16, 32, 64), croissance=8, couches_dense=2),
        )
        return replace(base, **surcharges) if surcharges else base

    def vers_dict(self) -> dict:
        return asdict(self)


# =========================================================================
#  CHARGEMENT
# =========================================================================

def _tuples(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuples(x) for x in v)
    return v


def _fusionner(base: dict, ajout: dict, chemin: str = "") -> dict:
    """Fusion recursive ; une cle absente de ``base`` est une erreur."""
    sortie = dict(base)
    for cle, valeur in ajout.items():
        nom = f"{chemin}{cle}"
        if cle not in base:
            raise ErreurConfiguration(f"Cle de configuration inconnue: {nom}")
        if isinstance(base[cle], dict) and isinstance(valeur, dict):
            sortie[cle] = _fusionner(base[cle], valeur, nom + ".")
        else:
            sortie[cle] = valeur
    return sortie


def depuis_dict(params: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Fusionne ``params`` (partiel) sur ``base`` (defauts sinon)."""
    d = _fusionner((base or TrainConfig()).vers_dict(), params)
    kwargs = {}
    for f in fields(TrainConfig):
        valeur = d[f.name]
        if f.name in SOUS_CONFIGS:
            sous = SOUS_CONFIGS[f.name]
            try:
                valeur = sous(**{k: _tuples(v) for k, v in valeur.items()})
            except TypeError as e:
                raise ErreurConfiguration(f"Section {f.name} invalide: {e}") from e
        else:
            valeur = _tuples(valeur)
        kwargs[f.name] = valeur
    return TrainConfig(**kwargs)


def charger_config(chemin: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Lit un fichier TOML ou JSON partiel.

    Raises:
        ErreurConfiguration: Extension inconnue, syntaxe invalide ou cle inconnue.
    """
    chemin = Path(chemin)
    try:
        texte = chemin.read_text(encoding="utf-8")
    except OSError as e:
        raise ErreurConfiguration(f"Configuration illisible: {chemin} ({e})") from e
    try:
        if chemin.suffix == ".toml":
            params = tomllib.loads(texte)
        elif chemin.suffix == ".json":
            params = json.loads(texte)
        else:
            raise ErreurConfiguration(f"Format de configuration inconnu: {chemin}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ErreurConfiguration(f"Configuration invalide: {chemin} ({e})") from e
    logger.debug("Configuration chargee: %s", chemin)
    return depuis_dict(params, base)


def _valeur(texte: str):
    try:
        return json.loads(texte)
    except json.JSONDecodeError:
        return texte


def appliquer_surcharges(cfg: TrainConfig, surcharges: list[str]) -> TrainConfig:
    """Applique des surcharges ``cle.sous_cle=valeur`` (valeur JSON, sinon texte)."""
    if not surcharges:
        return cfg
    params: dict = {}
    for s in surcharges:
        if "=" not in s:
            raise ErreurConfiguration(f"Surcharge invalide (cle=valeur attendu): {s}")
        cle, texte = s.split("=", 1)
        parties = cle.strip().split(".")
        cible = params
        for p in parties[:-1]:
            cible = cible.setdefault(p, {})
        cible[parties[-1]] = _valeur(texte.strip())
    return depuis_dict(params, cfg)


def hash_config(cfg: TrainConfig) -> str:
    """Empreinte SHA-256 des champs qui determinent le modele et l'optimisation."""
    d = {k: v for k, v in cfg.vers_dict().items() if k not in HORS_EMPREINTE}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()
