"""Interface en ligne de commande d'OmbreNet.

Sous-commandes::

    build-pairs   corpus de paires de patchs etiquetees
    train-cpm     entrainement du CPM
    train         entrainement de CANet (variante --variant)
    remove        suppression d'ombre sur une image
    evaluate      RMSE LAB S / N / A d'un ou plusieurs points de controle
    stats         ecarts L / A / B dans l'ombre
    video         suppression image par image d'une sequence

Chaque sous-commande retourne 0 en cas de succes, 1 avec un diagnostic
d'une ligne sur stderr en cas d'erreur (2 pour une erreur d'usage).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import TrainConfig, appliquer_surcharges, charger_config
from .datasets import (
    Disposition, Echantillon, Partition, build_pair_corpus, charger_echantillons,
    ecrire_corpus, ingest_dataset, lire_corpus,
)
from .erreurs import ErreurOmbreNet, ErreurValidation
from .evaluation import (
    AGREGATIONS, METRIQUES, RapportEvaluation, channel_gap_stats, evaluate,
    table_ablation, traiter_video,
)
from .imaging import load_image, save_image
from .journal import configurer_journalisation
from .points_controle import Checkpoint, charger_pipeline
from .rapport_pdf import exporter_rapport_pdf
from .training import train_canet, train_cpm
from .variantes import AblationVariant

logger = logging.getLogger(__name__)

PROFILS = ("reference", "bureau")


# =========================================================================
#  CONFIGURATION ET DONNEES
# =========================================================================

def _config(args) -> TrainConfig:
    """Profil, fichier ``--config``, surcharges ``--set`` puis options communes."""
    base = TrainConfig.bureau() if args.profil == "bureau" else TrainConfig()
    cfg = charger_config(args.config, base) if args.config else base
    cfg = appliquer_surcharges(cfg, args.set)
    changements = {}
    if args.seed is not None:
        changements["seed"] = args.seed
    if args.variant is not None:
        changements["variant"] = args.variant
    if getattr(args, "root", None):
        changements["dataset_root"] = str(args.root)
    if getattr(args, "layout", None):
        changements["layout"] = args.layout
    if getattr(args, "masques", None):
        changements["dossier_masques"] = str(args.masques)
    return replace(cfg, **changements) if changements else cfg


def _config_explicite(args) -> bool:
    return bool(args.config or args.set)


def _echantillons(cfg: TrainConfig, split: Partition, obligatoire: bool = True) -> list[Echantillon]:
    if not cfg.dataset_root:
        raise ErreurValidation("Racine du jeu de donnees absente (--root ou dataset_root)")
    jeu = ingest_dataset(cfg.dataset_root, cfg.layout, cfg.dossier_masques, splits=(split,))
    if not jeu.records:
        if obligatoire:
            raise ErreurValidation(f"Aucune image {split.value} dans {cfg.dataset_root}")
        return []
    return charger_echantillons(jeu.records, cfg.input_size, max(1, cfg.workers))


# =========================================================================
#  SOUS-COMMANDES
# =========================================================================

def cmd_build_pairs(args) -> int:
    cfg = _config(args)
    echantillons = _echantillons(cfg, Partition.TRAIN)
    corpus = build_pair_corpus(echantillons, args.n or cfg.n_paires, cfg.seed)
    empreinte = ecrire_corpus(corpus, args.out)
    n1, n0 = corpus.compter()
    logger.info("Corpus %s: %d correspondances, %d non-correspondances", args.out, n1, n0)
    print(empreinte)
    return 0


def cmd_train_cpm(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, checkpoint_dir=str(args.out))
    echantillons = _echantillons(cfg, Partition.TRAIN)
    corpus = lire_corpus(args.corpus) if args.corpus else build_pair_corpus(
        echantillons, cfg.n_paires, cfg.seed)
    reprise = Checkpoint.charger(args.reprendre, "cpm") if args.reprendre else None
    resultat = train_cpm(cfg, corpus, echantillons, reprise=reprise)
    print(resultat.chemin)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, checkpoint_dir=str(args.out))
    echantillons = _echantillons(cfg, Partition.TRAIN)
    validation = _echantillons(cfg, Partition.TEST, obligatoire=False) or None
    corpus = lire_corpus(args.corpus) if args.corpus else None
    if cfg.cpm_conjoint and corpus is None:
        corpus = build_pair_corpus(echantillons, cfg.n_paires, cfg.seed)
    reprise = Checkpoint.charger(args.reprendre, "canet") if args.reprendre else None
    resultat = train_canet(cfg, echantillons, cpm=args.cpm, reprise=reprise,
                           echantillons_val=validation, corpus=corpus)
    print(resultat.chemin)
    return 0


def cmd_remove(args) -> int:
    cfg = _config(args)
    pipeline = charger_pipeline(args.checkpoint, args.variant, cfg if _config_explicite(args) else None)
    img = load_image(args.image)
    debut = time.perf_counter()
    matchset = pipeline.matchset(img)
    sortie = pipeline.supprimer(img, matchset)
    logger.info("Suppression %dx%d en %.3f s (%d requetes appariees)", img.largeur, img.hauteur,
                time.perf_counter() - debut, len(matchset))
    save_image(sortie, args.out)
    if args.matchset:
        matchset.ecrire_json(args.matchset)
    print(args.out)
    return 0


def _chemin_rapport(base: Path, rapport: RapportEvaluation, plusieurs: bool) -> Path:
    if not plusieurs:
        return base
    return base.with_name(f"{base.stem}_{rapport.variante}{base.suffix}")


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not args.checkpoint and not args.identite:
        raise ErreurValidation("Au moins un --checkpoint (ou --identite) est requis")
    echantillons = _echantillons(cfg, Partition(args.split))
    options = {"metrique": args.metric, "agregation": args.agregation}
    rapports = []
    if args.identite:
        rapports.append(evaluate(lambda img: img, echantillons, "identite", **options))
    for chemin in args.checkpoint or []:
        pipeline = charger_pipeline(chemin, args.variant, cfg if _config_explicite(args) else None)
        rapports.append(evaluate(pipeline, echantillons, pipeline.variante.value, **options))

    plusieurs = len(rapports) > 1
    print(table_ablation(rapports) if plusieurs else rapports[0].table_texte())
    if args.json:
        for r in rapports:
            r.ecrire_json(_chemin_rapport(Path(args.json), r, plusieurs))
    if args.pdf:
        exporter_rapport_pdf(args.pdf, rapports, ecarts=channel_gap_stats(echantillons))
    return 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    stats = channel_gap_stats(_echantillons(cfg, Partition(args.split)))
    print(f"L: {stats.l:.3f}  A: {stats.a:.3f}  B: {stats.b:.3f}  ({stats.n_images} images)")
    if args.out:
        Path(args.out).write_text(json.dumps(stats.vers_dict(), indent=2), encoding="utf-8")
    return 0


def cmd_video(args) -> int:
    cfg = _config(args)
    pipeline = charger_pipeline(args.checkpoint, args.variant, cfg if _config_explicite(args) else None)
    ecrits = traiter_video(pipeline, args.dossier, args.out, workers=args.workers)
    print(f"{len(ecrits)} images -> {args.out}")
    return 0


# =========================================================================
#  ANALYSEUR
# =========================================================================

def _options_communes(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="Fichier TrainConfig (TOML ou JSON)")
    p.add_argument("--profil", choices=PROFILS, default="reference",
                   help="Valeurs par defaut : reference ou bureau (64x64)")
    p.add_argument("--set", action="append", default=[], metavar="CLE=VALEUR",
                   help="Surcharge pointee, repetable (ex. cft.k=5)")
    p.add_argument("--seed", type=int, help="Graine unique")
    p.add_argument("--variant", choices=[v.value for v in AblationVariant], help="Variante d'ablation")
    p.add_argument("--verbose", "-v", action="store_true", help="Journalisation DEBUG")


def _options_jeu(p: argparse.ArgumentParser):
    p.add_argument("--root", type=Path, help="Racine du jeu de donnees")
    p.add_argument("--layout", type=str.upper, choices=[d.value for d in Disposition],
                   help="Convention du jeu")
    p.add_argument("--masques", type=Path, help="Dossier des masques (SRD)")


def construire_analyseur() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ombrenet",
        description="Suppression d'ombres en deux etapes guidee par le contexte",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sous = parser.add_subparsers(dest="commande", required=True)

    p = sous.add_parser("build-pairs", help="Construit le corpus de paires")
    _options_communes(p)
    _options_jeu(p)
    p.add_argument("--n", type=int, help="Nombre de paires (defaut : n_paires)")
    p.add_argument("--out", type=Path, default=Path("corpus.bin"), help="Fichier du corpus")
    p.set_defaults(fonction=cmd_build_pairs)

    p = sous.add_parser("train-cpm", help="Entraine le CPM")
    _options_communes(p)
    _options_jeu(p)
    p.add_argument("--corpus", type=Path, help="Corpus ecrit par build-pairs")
    p.add_argument("--reprendre", type=Path, help="Point de controle CPM a reprendre")
    p.add_argument("--out", type=Path, help="Dossier des points de controle")
    p.set_defaults(fonction=cmd_train_cpm)

    p = sous.add_parser("train", help="Entraine CANet")
    _options_communes(p)
    _options_jeu(p)
    p.add_argument("--cpm", type=Path, help="Point de controle CPM")
    p.add_argument("--corpus", type=Path, help="Corpus (cpm_conjoint)")
    p.add_argument("--reprendre", type=Path, help="Point de controle CANet a reprendre")
    p.add_argument("--out", type=Path, help="Dossier des points de controle")
    p.set_defaults(fonction=cmd_train)

    p = sous.add_parser("remove", help="Supprime l'ombre d'une image")
    _options_communes(p)
    p.add_argument("image", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Image de sortie")
    p.add_argument("--matchset", type=Path, help="Ecrit les correspondances en JSON")
    p.set_defaults(fonction=cmd_remove)

    p = sous.add_parser("evaluate", help="Evalue un ou plusieurs points de controle")
    _options_communes(p)
    _options_jeu(p)
    p.add_argument("--checkpoint", type=Path, action="append",
                   help="Point de controle CANet, repetable (table d'ablation)")
    p.add_argument("--identite", action="store_true", help="Ajoute le modele identite")
    p.add_argument("--split", choices=[s.value for s in Partition], default=Partition.TEST.value)
    p.add_argument("--metric", choices=METRIQUES, default="rmse")
    p.add_argument("--agregation", choices=AGREGATIONS, default="image")
    p.add_argument("--json", type=Path, help="Rapport JSON")
    p.add_argument("--pdf", type=Path, help="Rapport PDF")
    p.add_argument("--out", type=Path, help="Alias de --json")
    p.set_defaults(fonction=cmd_evaluate)

    p = sous.add_parser("stats", help="Ecarts L / A / B dans les zones d'ombre")
    _options_communes(p)
    _options_jeu(p)
    p.add_argument("--split", choices=[s.value for s in Partition], default=Partition.TRAIN.value)
    p.add_argument("--out", type=Path, help="Statistiques en JSON")
    p.set_defaults(fonction=cmd_stats)

    p = sous.add_parser("video", help="Traite une sequence d'images")
    _options_communes(p)
    p.add_argument("dossier", type=Path, help="Dossier des images de la sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Dossier de sortie")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fonction=cmd_video)

    return parser


def main(argv: list[str] | None = None) -> int:
    """Point d'entree ; retourne le code de sortie."""
    args = construire_analyseur().parse_args(argv)
    configurer_journalisation(args.verbose)
    if getattr(args, "out", None) is not None and args.commande == "evaluate" and args.json is None:
        args.json = args.out
    try:
        return args.fonction(args)
    except (ErreurOmbreNet, OSError) as e:
        print(f"ombrenet {args.commande}: {e}", file=sys.stderr)
        return 1
