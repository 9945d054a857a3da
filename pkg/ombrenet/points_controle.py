"""Points de controle partages par le CPM et CANet.

Un point de controle est un dictionnaire ``torch.save`` :

    format, version, type ("cpm" ou "canet"), constantes, etape, epoque,
    poids, optimiseur, config (dict complet), config_hash, variante,
    rng (etats des generateurs), cpm_poids (CANet seulement)

Relire puis reecrire un point de controle sous le meme nom de fichier
produit un fichier identique octet pour octet.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import TrainConfig, depuis_dict, hash_config
from .cpm import CONSTANTES_CPM, CpmNet
from .erreurs import ErreurPointControle
from .variantes import AblationVariant, PipelineOmbre, make_variant

logger = logging.getLogger(__name__)

FORMAT_POINT_CONTROLE = "ombrenet-checkpoint"
VERSION_POINT_CONTROLE = 1
TYPES = ("cpm", "canet")


def empreinte_poids(module: torch.nn.Module | dict) -> str:
    """SHA-256 des poids (cles triees, octets des tenseurs)."""
    etat = module.state_dict() if isinstance(module, torch.nn.Module) else module
    h = hashlib.sha256()
    for cle in sorted(etat):
        t = etat[cle].detach().cpu().contiguous()
        h.update(cle.encode("utf-8"))
        h.update(str(t.dtype).encode("ascii"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Etat complet d'un entrainement a une fin d'epoque."""
    type: str
    poids: dict
    config: dict
    etape: int = 0
    epoque: int = 0
    optimiseur: dict | None = None
    variante: str = AblationVariant.FULL.value
    rng: dict = field(default_factory=dict)
    cpm_poids: dict | None = None
    config_hash: str = ""
    version: int = VERSION_POINT_CONTROLE
    constantes: dict = field(default_factory=lambda: dict(CONSTANTES_CPM))

    def __post_init__(self):
        if self.type not in TYPES:
            raise ErreurPointControle(f"Type de point de controle inconnu: {self.type}")
        if not self.config_hash:
            self.config_hash = hash_config(self.train_config())

    def train_config(self) -> TrainConfig:
        return depuis_dict(self.config)

    def vers_dict(self) -> dict:
        return {
            "format": FORMAT_POINT_CONTROLE,
            "version": self.version,
            "type": self.type,
            "constantes": self.constantes,
            "etape": self.etape,
            "epoque": self.epoque,
            "poids": self.poids,
            "optimiseur": self.optimiseur,
            "config": self.config,
            "config_hash": self.config_hash,
            "variante": self.variante,
            "rng": self.rng,
            "cpm_poids": self.cpm_poids,
        }

    def sauver(self, chemin: str | Path) -> Path:
        chemin = Path(chemin)
        chemin.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.vers_dict(), chemin)
        return chemin

    @classmethod
    def charger(cls, chemin: str | Path, type_attendu: str | None = None) -> "Checkpoint":
        """Relit un point de controle.

        Raises:
            ErreurPointControle: Fichier illisible, format, version ou type
                inattendu.
        """
        chemin = Path(chemin)
        try:
            d = torch.load(chemin, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, EOFError) as e:
            raise ErreurPointControle(f"Point de controle illisible: {chemin} ({e})") from e
        if not isinstance(d, dict) or d.get("format") != FORMAT_POINT_CONTROLE:
            raise ErreurPointControle(f"Format de point de controle inconnu: {chemin}")
        if d.get("version") != VERSION_POINT_CONTROLE:
            raise ErreurPointControle(
                f"Version {d.get('version')} non supportee (attendu {VERSION_POINT_CONTROLE}): {chemin}")
        if type_attendu and d["type"] != type_attendu:
            raise ErreurPointControle(f"Point de controle {d['type']} au lieu de {type_attendu}: {chemin}")
        return cls(type=d["type"], poids=d["poids"], config=d["config"], etape=d["etape"],
                   epoque=d["epoque"], optimiseur=d["optimiseur"], variante=d["variante"],
                   rng=d["rng"], cpm_poids=d["cpm_poids"], config_hash=d["config_hash"],
                   version=d["version"], constantes=d["constantes"])

    def verifier_reprise(self, cfg: TrainConfig):
        """Refuse une reprise avec une configuration differente."""
        attendu = hash_config(cfg)
        if attendu != self.config_hash:
            raise ErreurPointControle(
                f"Configuration differente de celle du point de controle "
                f"({attendu[:12]} != {self.config_hash[:12]})")


def cpm_depuis(source: Checkpoint | dict | str | Path) -> CpmNet:
    """Reconstruit un CPM depuis un point de controle (ou ses poids)."""
    if isinstance(source, (str, Path)):
        source = Checkpoint.charger(source)
    if isinstance(source, Checkpoint):
        poids = source.poids if source.type == "cpm" else source.cpm_poids
        if poids is None:
            raise ErreurPointControle("Le point de controle ne contient pas de CPM")
    else:
        poids = source
    modele = CpmNet()
    modele.load_state_dict(poids)
    modele.eval()
    return modele


def charger_pipeline(source: Checkpoint | str | Path,
                     variante: AblationVariant | str | None = None,
                     cfg: TrainConfig | None = None) -> PipelineOmbre:
    """Reconstruit le pipeline d'inference d'un point de controle CANet.

    Args:
        source: Point de controle ou chemin.
        variante: Variante attendue ; erreur si elle differe.
        cfg: Configuration d'inference (appariement) ; celle du point de
            controle sinon. Les architectures viennent toujours du point
            de controle.

    Raises:
        ErreurPointControle: Type ou variante incoherent.
    """
    ckpt = source if isinstance(source, Checkpoint) else Checkpoint.charger(source, "canet")
    if ckpt.type != "canet":
        raise ErreurPointControle("Un point de controle CANet est requis")
    if variante is not None and AblationVariant.depuis(variante).value != ckpt.variante:
        raise ErreurPointControle(
            f"Variante demandee {AblationVariant.depuis(variante).value}, "
            f"point de controle entraine en {ckpt.variante}")
    archi = ckpt.train_config()
    appariement = (cfg or archi).appariement
    cpm = cpm_depuis(ckpt.cpm_poids) if ckpt.cpm_poids is not None else None
    pipeline = make_variant(ckpt.variante, archi.backbone, archi.unet, archi.cft, cpm=cpm,
                            appariement=appariement, **archi.options_etape_un)
    pipeline.reseau.load_state_dict(ckpt.poids)
    pipeline.reseau.eval()
    return pipeline
