"""Boucles d'entrainement du CPM et de CANet.

Le CPM est entraine seul sur le corpus de paires, puis fige pendant
l'entrainement de CANet (sauf ``cpm_conjoint``). Les deux boucles :

    - tirent tout leur hasard d'une graine unique (``set_global_determinism``) ;
    - ecrivent un point de controle a chaque fin d'epoque (et un initial) ;
    - s'arretent sur une perte non finie en conservant le dernier point de
      controle fini (``ErreurPerteNonFinie.point_controle``) ;
    - journalisent chaque epoque (et chaque etape CANet) en JSON-lines.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.utils.data import DataLoader, Subset
from tqdm import tqdm

from .cache_appariements import CacheAppariements
from .canet import canet_loss, construire_extracteur, tenseurs_image
from .config import TrainConfig, hash_config
from .cpm import CpmNet, DatasetPaires, MatchSet, cpm_loss
from .datasets import CorpusPaires, Echantillon
from .erreurs import ErreurConfiguration, ErreurPerteNonFinie, ErreurValidation
from .evaluation import rmse_lab
from .journal import JournalEntrainement
from .points_controle import Checkpoint, cpm_depuis, empreinte_poids
from .variantes import PipelineOmbre, make_variant

logger = logging.getLogger(__name__)

NOM_CPM = "cpm.pt"
NOM_CANET = "canet.pt"


# =========================================================================
#  DETERMINISME
# =========================================================================

def set_global_determinism(seed: int) -> torch.Generator:
    """Graine Python, numpy et torch ; algorithmes deterministes.

    Returns:
        Generateur torch dedie au melange des donnees.
    """
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
    return torch.Generator().manual_seed(seed)


def _etats_rng(generateur: torch.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "generateur": generateur.get_state(),
            "numpy": np.random.get_state(), "python": random.getstate()}


def _restaurer_rng(etats: dict, generateur: torch.Generator):
    torch.set_rng_state(etats["torch"])
    generateur.set_state(etats["generateur"])
    np.random.set_state(etats["numpy"])
    random.setstate(etats["python"])


def _optimiseur(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def _journal(cfg: TrainConfig, journal: JournalEntrainement | None) -> JournalEntrainement:
    if journal is not None:
        return journal
    return JournalEntrainement(cfg.journal or Path(cfg.checkpoint_dir) / "journal.jsonl")


@dataclass
class Entrainement:
    """Resultat d'un entrainement.

    Attributes:
        modele: ``CpmNet`` ou ``PipelineOmbre`` entraine.
        point_controle: Dernier point de controle.
        chemin: Fichier du point de controle.
        historique: Une entree par epoque.
    """
    modele: CpmNet | PipelineOmbre
    point_controle: Checkpoint
    chemin: Path
    historique: list[dict] = field(default_factory=list)


RappelEpoque = Callable[[int, torch.nn.Module], None]


# =========================================================================
#  CPM
# =========================================================================

def _finie(valeur: torch.Tensor) -> bool:
    return bool(torch.isfinite(valeur).all())


def _epoque_cpm(modele: CpmNet, chargeur: DataLoader, opt: torch.optim.Optimizer,
                carre: bool, chemin: Path, barre: bool = False) -> tuple[dict, int]:
    """Une epoque d'optimisation ; leve ``ErreurPerteNonFinie`` si besoin."""
    modele.train()
    somme = {"reg": 0.0, "cls": 0.0, "total": 0.0}
    justes = vus = etapes = 0
    for x1, x2, typ, corr in tqdm(chargeur, desc="cpm", leave=False, disable=not barre):
        logits, score = modele(x1, x2)
        comp = cpm_loss(logits, score, typ, corr, carre=carre)
        if not _finie(comp.total):
            raise ErreurPerteNonFinie("Perte CPM non finie, entrainement interrompu",
                                      point_controle=chemin)
        opt.zero_grad()
        comp.total.backward()
        opt.step()
        n = x1.shape[0]
        somme["reg"] += float(comp.reg) * n
        somme["cls"] += float(comp.cls) * n
        somme["total"] += float(comp.total) * n
        justes += int((logits.argmax(dim=1) == typ).sum())
        vus += n
        etapes += 1
    metriques = {k: v / max(vus, 1) for k, v in somme.items()}
    metriques["precision"] = justes / max(vus, 1)
    return metriques, etapes


@torch.no_grad()
def evaluer_cpm(modele: CpmNet, chargeur: DataLoader, carre: bool = False) -> dict:
    """Pertes et precision de type moyennes sur un chargeur."""
    modele.eval()
    somme = {"reg": 0.0, "cls": 0.0}
    justes = vus = 0
    for x1, x2, typ, corr in chargeur:
        logits, score = modele(x1, x2)
        comp = cpm_loss(logits, score, typ, corr, carre=carre)
        n = x1.shape[0]
        somme["reg"] += float(comp.reg) * n
        somme["cls"] += float(comp.cls) * n
        justes += int((logits.argmax(dim=1) == typ).sum())
        vus += n
    if vus == 0:
        return {}
    return {"reg": somme["reg"] / vus, "cls": somme["cls"] / vus, "precision": justes / vus}


def _partager(n: int, part: float, generateur: torch.Generator) -> tuple[list[int], list[int]]:
    ordre = torch.randperm(n, generator=generateur).tolist()
    n_val = int(n * part)
    return sorted(ordre[n_val:]), sorted(ordre[:n_val])


def train_cpm(cfg: TrainConfig, corpus: CorpusPaires, echantillons: list[Echantillon],
              journal: JournalEntrainement | None = None, reprise: Checkpoint | None = None,
              rappel_epoque: RappelEpoque | None = None) -> Entrainement:
    """Entraine le CPM sur le corpus de paires.

    Args:
        cfg: Configuration (lr, epochs_cpm, batch_cpm, carre_reg, ...).
        corpus: Paires etiquetees.
        echantillons: Rasters des images du corpus.
        journal: Journal (defaut : ``checkpoint_dir/journal.jsonl``).
        reprise: Point de controle CPM dont on reprend l'entrainement.
        rappel_epoque: Appele apres chaque epoque avec (epoque, modele).

    Returns:
        ``Entrainement`` avec le CPM entraine.

    Raises:
        ErreurValidation: Corpus vide.
        ErreurPerteNonFinie: Perte non finie (dernier point de controle conserve).
        ErreurPointControle: Reprise avec une configuration differente.
    """
    if len(corpus) == 0:
        raise ErreurValidation("Corpus de paires vide")
    journal = _journal(cfg, journal)
    generateur = set_global_determinism(cfg.seed)
    modele = CpmNet()
    jeu = DatasetPaires(corpus, echantillons)
    idx_train, idx_val = _partager(len(jeu), cfg.part_validation, generateur)
    if not idx_train:
        raise ErreurValidation("Aucune paire d'entrainement apres separation de la validation")
    chargeur = DataLoader(Subset(jeu, idx_train), batch_size=cfg.batch_cpm, shuffle=True,
                          generator=generateur, num_workers=0)
    chargeur_val = DataLoader(Subset(jeu, idx_val), batch_size=cfg.batch_cpm) if idx_val else None
    opt = _optimiseur(modele.parameters(), cfg)
    chemin = Path(cfg.checkpoint_dir) / NOM_CPM
    etape = debut = 0

    if reprise is not None:
        reprise.verifier_reprise(cfg)
        modele.load_state_dict(reprise.poids)
        opt.load_state_dict(reprise.optimiseur)
        _restaurer_rng(reprise.rng, generateur)
        etape, debut = reprise.etape, reprise.epoque
        logger.info("Reprise du CPM a l'epoque %d", debut)

    def point(epoque: int) -> Checkpoint:
        return Checkpoint("cpm", modele.state_dict(), cfg.vers_dict(), etape, epoque,
                          opt.state_dict(), cfg.variant, _etats_rng(generateur),
                          config_hash=hash_config(cfg))

    ckpt = point(debut)
    ckpt.sauver(chemin)
    historique = []
    for epoque in range(debut, cfg.epochs_cpm):
        metriques, n = _epoque_cpm(modele, chargeur, opt, cfg.carre_reg, chemin, cfg.barre_progression)
        etape += n
        if chargeur_val is not None:
            metriques.update({f"val_{k}": v for k, v in evaluer_cpm(modele, chargeur_val, cfg.carre_reg).items()})
        metriques["epoque"] = epoque + 1
        journal.ecrire(etape, "cpm", cfg.lr, **metriques)
        historique.append(metriques)
        logger.info("CPM epoque %d/%d: reg=%.4f cls=%.4f precision=%.3f", epoque + 1,
                    cfg.epochs_cpm, metriques["reg"], metriques["cls"], metriques["precision"])
        ckpt = point(epoque + 1)
        ckpt.sauver(chemin)
        if rappel_epoque is not None:
            rappel_epoque(epoque, modele)

    modele.eval()
    return Entrainement(modele, ckpt, chemin, historique)


# =========================================================================
#  CANET
# =========================================================================

@dataclass
class _Tenseurs:
    rgb: torch.Tensor
    lab: torch.Tensor
    gt_rgb: torch.Tensor
    gt_lab: torch.Tensor


def _preparer(echantillons: list[Echantillon]) -> list[_Tenseurs]:
    sortie = []
    for e in echantillons:
        rgb, lab = tenseurs_image(e.ombre)
        gt_rgb, gt_lab = tenseurs_image(e.sans_ombre)
        sortie.append(_Tenseurs(rgb, lab, gt_rgb, gt_lab))
    return sortie


def _cle_apparieur(pipeline: PipelineOmbre, cpm: CpmNet | None) -> str:
    if pipeline.variante.utilise_cpm:
        return empreinte_poids(cpm)
    return pipeline.variante.value


def _matchsets(pipeline: PipelineOmbre, cpm: CpmNet | None, echantillons: list[Echantillon],
               cache: CacheAppariements, cfg: TrainConfig) -> list[MatchSet]:
    """MatchSet de chaque image, lus dans le cache quand c'est possible."""
    if pipeline.apparieur is None:
        return [MatchSet() for _ in echantillons]
    cle = _cle_apparieur(pipeline, cpm)
    return [cache.obtenir(e.ombre, cle, cfg.appariement, pipeline.apparieur) for e in echantillons]


@torch.no_grad()
def rmse_validation(pipeline: PipelineOmbre, echantillons: list[Echantillon],
                    matchsets: list[MatchSet] | None = None) -> float:
    """RMSE LAB moyen (image entiere) du pipeline sur des echantillons."""
    if not echantillons:
        return float("nan")
    valeurs = []
    for i, e in enumerate(echantillons):
        pred = pipeline.supprimer(e.ombre, matchsets[i] if matchsets else None)
        valeurs.append(rmse_lab(pred, e.sans_ombre, e.masque).all)
    return float(np.mean(valeurs))


def train_canet(cfg: TrainConfig, echantillons: list[Echantillon],
                cpm: CpmNet | Checkpoint | str | Path | None = None,
                journal: JournalEntrainement | None = None,
                reprise: Checkpoint | None = None,
                echantillons_val: list[Echantillon] | None = None,
                corpus: CorpusPaires | None = None,
                rappel_epoque: RappelEpoque | None = None) -> Entrainement:
    """Entraine CANet (variante ``cfg.variant``) avec le CPM fige.

    Args:
        cfg: Configuration.
        echantillons: Images d'entrainement (deja a ``cfg.input_size``).
        cpm: CPM entraine (requis pour ``full`` et ``direct_replace_cft``).
        journal: Journal (defaut : ``checkpoint_dir/journal.jsonl``).
        reprise: Point de controle CANet dont on reprend l'entrainement.
        echantillons_val: Images de validation (defaut : entrainement).
        corpus: Corpus de paires, requis par ``cpm_conjoint``.
        rappel_epoque: Appele apres chaque epoque avec (epoque, reseau).

    Returns:
        ``Entrainement`` avec le pipeline entraine.
    """
    if not echantillons:
        raise ErreurValidation("Aucune image d'entrainement")
    variante = cfg.variante
    journal = _journal(cfg, journal)
    generateur = set_global_determinism(cfg.seed)

    if isinstance(cpm, (Checkpoint, str, Path)):
        cpm = cpm_depuis(cpm)
    if reprise is not None and reprise.cpm_poids is not None:
        cpm = cpm_depuis(reprise.cpm_poids)
    if variante.utilise_cpm and cpm is None:
        raise ErreurConfiguration(f"La variante {variante.value} requiert un CPM entraine")
    if cfg.cpm_conjoint and (corpus is None or cpm is None):
        raise ErreurConfiguration("cpm_conjoint requiert un CPM et le corpus de paires")

    pipeline = make_variant(variante, cfg.backbone, cfg.unet, cfg.cft, cpm=cpm,
                            appariement=cfg.appariement, **cfg.options_etape_un)
    reseau = pipeline.reseau
    if cpm is not None:
        cpm.requires_grad_(cfg.cpm_conjoint)
        cpm.eval()
    extracteur = construire_extracteur(cfg.extracteur, graine=cfg.seed)
    opt = _optimiseur(reseau.parameters(), cfg)
    cache = CacheAppariements(cfg.cache_matchsets)
    donnees = _preparer(echantillons)
    chemin = Path(cfg.checkpoint_dir) / NOM_CANET
    etape = debut = 0

    opt_cpm = chargeur_paires = None
    if cfg.cpm_conjoint:
        opt_cpm = _optimiseur(cpm.parameters(), cfg)
        chargeur_paires = DataLoader(DatasetPaires(corpus, echantillons), batch_size=cfg.batch_cpm,
                                     shuffle=True, generator=generateur)

    if reprise is not None:
        reprise.verifier_reprise(cfg)
        reseau.load_state_dict(reprise.poids)
        opt.load_state_dict(reprise.optimiseur)
        _restaurer_rng(reprise.rng, generateur)
        etape, debut = reprise.etape, reprise.epoque
        logger.info("Reprise de CANet a l'epoque %d", debut)

    def point(epoque: int) -> Checkpoint:
        return Checkpoint("canet", reseau.state_dict(), cfg.vers_dict(), etape, epoque,
                          opt.state_dict(), variante.value, _etats_rng(generateur),
                          cpm_poids=cpm.state_dict() if cpm is not None else None,
                          config_hash=hash_config(cfg))

    ckpt = point(debut)
    ckpt.sauver(chemin)
    historique = []
    for epoque in range(debut, cfg.epochs_canet):
        matchsets = _matchsets(pipeline, cpm, echantillons, cache, cfg)
        reseau.train()
        ordre = torch.randperm(len(donnees), generator=generateur).tolist()
        sommes: dict[str, float] = {}
        lots = [ordre[i:i + cfg.batch_size] for i in range(0, len(ordre), cfg.batch_size)]
        for lot in tqdm(lots, desc=f"canet {epoque + 1}", leave=False, disable=not cfg.barre_progression):
            rgb = torch.cat([donnees[i].rgb for i in lot])
            lab = torch.cat([donnees[i].lab for i in lot])
            gt_rgb = torch.cat([donnees[i].gt_rgb for i in lot])
            gt_lab = torch.cat([donnees[i].gt_lab for i in lot])
            sortie1, sortie2 = reseau(rgb, [matchsets[i] for i in lot], lab)
            comp = canet_loss(sortie1, sortie2, gt_rgb, gt_lab, cfg.loss_weights, extracteur,
                              cfg.mode_rem, cfg.etape_un_dans_rem)
            if not _finie(comp.total):
                raise ErreurPerteNonFinie("Perte CANet non finie, entrainement interrompu",
                                          point_controle=chemin)
            opt.zero_grad()
            comp.total.backward()
            opt.step()
            etape += 1
            valeurs = comp.en_dict()
            journal.ecrire(etape, "canet", cfg.lr, epoque=epoque + 1, **valeurs)
            for k, v in valeurs.items():
                sommes[k] = sommes.get(k, 0.0) + v

        metriques = {k: v / len(lots) for k, v in sommes.items()}
        if cfg.cpm_conjoint:
            m_cpm, n = _epoque_cpm(cpm, chargeur_paires, opt_cpm, cfg.carre_reg, chemin)
            cpm.eval()
            metriques.update({f"cpm_{k}": v for k, v in m_cpm.items()})
            matchsets = None
        val = echantillons_val if echantillons_val is not None else echantillons
        metriques["val_rmse"] = rmse_validation(
            pipeline, val, matchsets if echantillons_val is None else None)
        metriques["epoque"] = epoque + 1
        journal.ecrire(etape, "validation", cfg.lr, **metriques)
        historique.append(metriques)
        logger.info("CANet epoque %d/%d: total=%.4f rmse=%.3f", epoque + 1, cfg.epochs_canet,
                    metriques.get("total", math.nan), metriques["val_rmse"])
        ckpt = point(epoque + 1)
        ckpt.sauver(chemin)
        if rappel_epoque is not None:
            rappel_epoque(epoque, reseau)

    cache.close()
    reseau.eval()
    return Entrainement(pipeline, ckpt, chemin, historique)

