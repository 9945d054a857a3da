"""Cache SQLite des MatchSet calcules pendant l'entrainement.

Un MatchSet ne depend que de l'image, des poids du CPM et des parametres
de grille : la cle est le triplet (empreinte de l'image, empreinte du CPM,
parametres). La table est en lecture majoritaire ; les insertions passent
par un verrou unique.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cpm import MatchSet
from .imaging import ImagePlane

SQL_INIT = """
CREATE TABLE IF NOT EXISTS matchsets (
    image TEXT NOT NULL,
    cpm TEXT NOT NULL,
    parametres TEXT NOT NULL,
    contenu TEXT NOT NULL,
    PRIMARY KEY (image, cpm, parametres)
);
"""


def empreinte_image(img: ImagePlane) -> str:
    """SHA-256 du contenu de l'image (forme incluse)."""
    h = hashlib.sha256()
    h.update(str(img.data.shape).encode("ascii"))
    h.update(np.ascontiguousarray(img.data).tobytes())
    return h.hexdigest()


class CacheAppariements:
    """Gestionnaire du cache de MatchSet.

    Attributes:
        db_path: Fichier SQLite, ou ``":memory:"``.
        conn: Connexion SQLite active.
        succes: Nombre de lectures servies par le cache.
        echecs: Nombre de lectures manquees.
    """

    def __init__(self, db_path: str | Path = ":memory:"):
        self.db_path = str(db_path)
        if self.db_path != ":memory:":
            Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self.conn.executescript(SQL_INIT)
        self.conn.commit()
        self._verrou = threading.Lock()
        self.succes = 0
        self.echecs = 0

    def close(self):
        self.conn.close()

    @staticmethod
    def _parametres(params) -> str:
        if hasattr(params, "__dataclass_fields__"):
            params = asdict(params)
        return json.dumps(params, sort_keys=True)

    def lire(self, image: str, cpm: str, params) -> MatchSet | None:
        with self._verrou:
            row = self.conn.execute(
                "SELECT contenu FROM matchsets WHERE image = ? AND cpm = ? AND parametres = ?",
                (image, cpm, self._parametres(params)),
            ).fetchone()
        if row is None:
            self.echecs += 1
            return None
        self.succes += 1
        return MatchSet.depuis_dict(json.loads(row[0]))

    def ecrire(self, image: str, cpm: str, params, matchset: MatchSet):
        with self._verrou:
            self.conn.execute(
                "INSERT OR REPLACE INTO matchsets (image, cpm, parametres, contenu) VALUES (?, ?, ?, ?)",
                (image, cpm, self._parametres(params), json.dumps(matchset.vers_dict())),
            )
            self.conn.commit()

    def obtenir(self, img: ImagePlane, cpm: str, params, calcul) -> MatchSet:
        """Lit le MatchSet en cache ou le calcule avec ``calcul(img)`` et l'insere.

        Le ``image_id`` des ``PatchRef`` relus vaut toujours 0.
        """
        cle = empreinte_image(img)
        ms = self.lire(cle, cpm, params)
        if ms is None:
            ms = calcul(img)
            self.ecrire(cle, cpm, params, ms)
        return ms

    def __len__(self):
        with self._verrou:
            return self.conn.execute("SELECT COUNT(*) FROM matchsets").fetchone()[0]
