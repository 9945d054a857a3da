"""Exceptions d'OmbreNet.

Chaque erreur derive aussi de l'exception standard qu'elle precise
(``ValueError``, ``OSError``...) pour que l'appelant puisse continuer a
intercepter les exceptions natives.
"""


class ErreurOmbreNet(Exception):
    """Racine de toutes les erreurs du paquet."""


class ErreurValidation(ErreurOmbreNet, ValueError):
    """Raster ou tenseur invalide (forme, valeurs non finies, plages)."""


class ErreurConfiguration(ErreurOmbreNet, ValueError):
    """Parametre de configuration invalide ou inconnu."""


class ErreurDecodage(ErreurOmbreNet, OSError):
    """Fichier image illisible, corrompu ou de format non supporte."""


class ErreurCorpus(ErreurOmbreNet, RuntimeError):
    """Corpus de paires impossible a construire ou incoherent."""


class ErreurPointControle(ErreurOmbreNet, RuntimeError):
    """Point de controle incompatible (version, configuration, variante)."""


class ErreurPerteNonFinie(ErreurOmbreNet, FloatingPointError):
    """Perte NaN ou infinie pendant l'entrainement.

    Attributes:
        point_controle: Chemin du dernier point de controle fini conserve,
            ou ``None`` si aucune epoque n'a abouti.
    """

    def __init__(self, message: str, point_controle=None):
        super().__init__(message)
        self.point_controle = point_controle
