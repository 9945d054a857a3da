"""Journalisation d'OmbreNet.

Deux canaux :
    - ``logging`` standard pour les messages (un logger par module,
      configure une seule fois par le point d'entree CLI).
    - ``JournalEntrainement`` : fichier JSON-lines en ajout seul, une ligne
      par etape ou epoque d'entrainement (etape, composantes de perte,
      taux d'apprentissage, temps ecoule).
"""

import json
import logging
import math
import time
from pathlib import Path

FORMAT_LOG = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configurer_journalisation(verbeux: bool = False):
    """Configure le handler racine (a appeler depuis la CLI uniquement).

    Args:
        verbeux: Niveau ``DEBUG`` si vrai, ``INFO`` sinon.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbeux else logging.INFO,
        format=FORMAT_LOG,
        force=True,
    )


def _valeur_json(v):
    """Convertit une valeur (tenseur 0-d, numpy, float non fini) en JSON."""
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


class JournalEntrainement:
    """Journal JSON-lines en ajout seul.

    Attributes:
        chemin: Fichier cible, ou ``None`` pour garder les entrees en
            memoire seulement.
        entrees: Historique des entrees ecrites pendant la session.
    """

    def __init__(self, chemin: str | Path | None = None):
        self.chemin = Path(chemin) if chemin else None
        if self.chemin is not None:
            self.chemin.parent.mkdir(parents=True, exist_ok=True)
        self.entrees: list[dict] = []
        self._debut = time.monotonic()

    def ecrire(self, etape: int, phase: str, lr: float, **composantes):
        """Ajoute une ligne au journal.

        Args:
            etape: Numero d'etape d'optimisation (global).
            phase: Nom de la phase (``"cpm"``, ``"canet"``, ``"validation"``).
            lr: Taux d'apprentissage courant.
            **composantes: Pertes et metriques a enregistrer.

        Returns:
            Le dictionnaire ecrit.
        """
        entree = {
            "etape": int(etape),
            "phase": phase,
            **{k: _valeur_json(v) for k, v in composantes.items()},
            "lr": float(lr),
            "temps": round(time.monotonic() - self._debut, 3),
        }
        self.entrees.append(entree)
        if self.chemin is not None:
            with open(self.chemin, "a", encoding="utf-8") as f:
                f.write(json.dumps(entree, sort_keys=True) + "\n")
        return entree

    def valeurs(self, cle: str, phase: str | None = None) -> list:
        """Retourne la serie d'une composante, filtree par phase."""
        return [e[cle] for e in self.entrees
                if cle in e and (phase is None or e["phase"] == phase)]
