"""Reseau de suppression d'ombres en deux etapes et sa perte composite.

Etape 1 : encodeur dense (pyramide de caracteristiques), transfert
contextuel (CFT) sur les niveaux choisis, decodeur a sur-echantillonnage
et blocs residuels, puis deux tetes paralleles qui reconstruisent L et A/B
(LAB normalise : L / 100, A/B / 128).

Etape 2 : DenseUNet (encodeur-decodeur a blocs denses et connexions de
saut) qui recoit L, A/B et l'image ombree (6 canaux) et produit l'image
RGB finale dans [0, 1].

Perte : ``lambda_rem * L_rem + lambda_per * L_per + lambda_grad * L_grad``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cft import CftConfig, apply_cft
from .cpm import BlocResiduel, MatchSet
from .erreurs import ErreurConfiguration, ErreurValidation
from .imaging import ImagePlane, gradient_tenseur, lab_normalise

logger = logging.getLogger(__name__)

VARIANTES_BACKBONE = ("toy_dense", "pretrained_dense")
BRANCHES = ("L", "AB")
MODES_REM = ("mse", "norme")
EXTRACTEURS = ("aleatoire", "vgg19")


# =========================================================================
#  CONFIGURATIONS
# =========================================================================

@dataclass(frozen=True)
class BackboneConfig:
    """Encodeur de l'etape 1.

    Attributes:
        variant: ``"toy_dense"`` (entraine de zero) ou
            ``"pretrained_dense"`` (DenseNet121 de torchvision).
        largeurs: Canaux de chaque niveau de la pyramide.
        strides: Pas (pixels par cellule) de chaque niveau, croissants.
        croissance: Canaux ajoutes par couche d'un bloc dense.
        couches_dense: Couches par bloc dense.
        poids_imagenet: Charger les poids ImageNet (``pretrained_dense``).
    """
    variant: str = "toy_dense"
    largeurs: tuple[int, ...] = (64, 128, 256)
    strides: tuple[int, ...] = (2, 4, 8)
    croissance: int = 32
    couches_dense: int = 3
    poids_imagenet: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTES_BACKBONE:
            raise ErreurConfiguration(f"Backbone inconnu: {self.variant}")
        if len(self.strides) < 2 or len(self.largeurs) != len(self.strides):
            raise ErreurConfiguration("Au moins 2 niveaux, une largeur par pas")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ErreurConfiguration(f"Pas non strictement croissants: {self.strides}")
        if any(b % a for a, b in zip(self.strides, self.strides[1:])):
            raise ErreurConfiguration(f"Chaque pas doit diviser le suivant: {self.strides}")
        if any(r & (r - 1) for r in (b // a for a, b in zip((1,) + self.strides, self.strides))):
            raise ErreurConfiguration(f"Rapports de pas non puissances de 2: {self.strides}")

    @classmethod
    def densenet121(cls, poids_imagenet: bool = True) -> "BackboneConfig":
        """Niveaux denseblock1..3 de DenseNet121 (pas 4, 8, 16)."""
        return cls("pretrained_dense", (256, 512, 1024), (4, 8, 16), poids_imagenet=poids_imagenet)


@dataclass(frozen=True)
class UNetConfig:
    """DenseUNet de l'etape 2 (un niveau par largeur, /2 entre niveaux)."""
    largeurs: tuple[int, ...] = (64, 128, 256, 512)
    croissance: int = 32
    couches_dense: int = 3

    def __post_init__(self):
        if len(self.largeurs) < 2:
            raise ErreurConfiguration("DenseUNet: au moins 2 niveaux")


@dataclass(frozen=True)
class LossWeights:
    lambda_rem: float = 1.0
    lambda_per: float = 25.0
    lambda_grad: float = 5.0

    def __post_init__(self):
        if min(self.lambda_rem, self.lambda_per, self.lambda_grad) < 0:
            raise ErreurConfiguration(f"Poids de perte negatifs: {self}")


# =========================================================================
#  BLOCS
# =========================================================================

class BlocDense(nn.Module):
    """Couches 3x3 concatenees puis fusion 1x1 vers ``sortie`` canaux."""

    def __init__(self, entree: int, croissance: int, couches: int, sortie: int):
        super().__init__()
        self.couches = nn.ModuleList([
            nn.Sequential(nn.Conv2d(entree + i * croissance, croissance, 3, padding=1),
                          nn.ReLU(inplace=True))
            for i in range(couches)
        ])
        self.fusion = nn.Conv2d(entree + couches * croissance, sortie, 1)

    def forward(self, x):
        feats = [x]
        for couche in self.couches:
            feats.append(couche(torch.cat(feats, dim=1)))
        return F.relu(self.fusion(torch.cat(feats, dim=1)))


def _completer(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Bourrage replique a droite et en bas jusqu'a un multiple de ``multiple``."""
    h, w = x.shape[-2:]
    dh, dw = (-h) % multiple, (-w) % multiple
    if dh == 0 and dw == 0:
        return x
    return F.pad(x, (0, dw, 0, dh), mode="replicate")


# =========================================================================
#  PYRAMIDE DE CARACTERISTIQUES
# =========================================================================

@dataclass
class FeaturePyramid:
    """Niveaux N x C x Hs x Ws et leurs pas."""
    niveaux: list[torch.Tensor]
    strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.niveaux) != len(self.strides):
            raise ErreurValidation("Un pas par niveau attendu")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ErreurValidation(f"Pas non strictement croissants: {self.strides}")

    def __len__(self):
        return len(self.niveaux)

    def remplacer(self, indice: int, niveau: torch.Tensor) -> "FeaturePyramid":
        niveaux = list(self.niveaux)
        niveaux[indice] = niveau
        return FeaturePyramid(niveaux, self.strides)


class BackboneDense(nn.Module):
    """Encodeur dense : tige au pas du premier niveau, puis une transition par niveau."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        etages = []
        entree = 3
        precedent = 1
        for largeur, pas in zip(cfg.largeurs, cfg.strides):
            ratio = pas // precedent
            reduction = [nn.Conv2d(entree, largeur, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            for _ in range(int(math.log2(ratio)) - 1):
                reduction += [nn.Conv2d(largeur, largeur, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            etages.append(nn.Sequential(*reduction,
                                        BlocDense(largeur, cfg.croissance, cfg.couches_dense, largeur)))
            entree, precedent = largeur, pas
        self.etages = nn.ModuleList(etages)

    def forward(self, x) -> FeaturePyramid:
        niveaux = []
        for etage in self.etages:
            x = etage(x)
            niveaux.append(x)
        return FeaturePyramid(niveaux, self.cfg.strides)


class BackboneDenseNet121(nn.Module):
    """Sorties de denseblock1, 2 et 3 d'un DenseNet121 torchvision."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        from torchvision.models import DenseNet121_Weights, densenet121

        self.cfg = cfg
        poids = DenseNet121_Weights.IMAGENET1K_V1 if cfg.poids_imagenet else None
        f = densenet121(weights=poids).features
        self.tige = nn.Sequential(f.conv0, f.norm0, f.relu0, f.pool0, f.denseblock1)
        self.niveau2 = nn.Sequential(f.transition1, f.denseblock2)
        self.niveau3 = nn.Sequential(f.transition2, f.denseblock3)
        self.register_buffer("moyenne", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("ecart", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x) -> FeaturePyramid:
        x = (x - self.moyenne) / self.ecart
        n1 = self.tige(x)
        n2 = self.niveau2(n1)
        n3 = self.niveau3(n2)
        return FeaturePyramid([n1, n2, n3], self.cfg.strides)


def construire_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.variant == "pretrained_dense":
        return BackboneDenseNet121(cfg)
    return BackboneDense(cfg)


# =========================================================================
#  ETAPE 1
# =========================================================================

@dataclass
class StageOneOutput:
    """Sorties de l'etape 1 en LAB normalise.

    Attributes:
        l_hat: N x 1 x H x W, L / 100.
        ab_hat: N x 2 x H x W, A/B / 128.
    """
    l_hat: torch.Tensor
    ab_hat: torch.Tensor

    @property
    def lab_recombined(self) -> torch.Tensor:
        return torch.cat([self.l_hat, self.ab_hat], dim=1)

    def lab_borne(self) -> torch.Tensor:
        """LAB normalise borne aux plages valides (L dans [0, 1], A/B dans [-1, 1])."""
        return torch.cat([self.l_hat.clamp(0.0, 1.0), self.ab_hat.clamp(-1.0, 1.0)], dim=1)


class Decodeur(nn.Module):
    """Remonte la pyramide du niveau le plus grossier jusqu'a la resolution d'entree."""

    def __init__(self, largeurs: tuple[int, ...]):
        super().__init__()
        self.entree = nn.Conv2d(largeurs[-1], largeurs[-1], 1)
        self.fusions = nn.ModuleList()
        for i in range(len(largeurs) - 2, -1, -1):
            self.fusions.append(nn.Sequential(
                nn.Conv2d(largeurs[i + 1] + largeurs[i], largeurs[i], 3, padding=1),
                nn.ReLU(inplace=True),
                BlocResiduel(largeurs[i]),
            ))
        self.final = nn.Sequential(
            nn.Conv2d(largeurs[0] + 3, largeurs[0], 3, padding=1),
            nn.ReLU(inplace=True),
            BlocResiduel(largeurs[0]),
        )

    def forward(self, pyramide: FeaturePyramid, rgb: torch.Tensor) -> torch.Tensor:
        niveaux = pyramide.niveaux
        x = self.entree(niveaux[-1])
        for fusion, saut in zip(self.fusions, reversed(niveaux[:-1])):
            x = F.interpolate(x, size=saut.shape[-2:], mode="bilinear", align_corners=False)
            x = fusion(torch.cat([x, saut], dim=1))
        x = F.interpolate(x, size=rgb.shape[-2:], mode="bilinear", align_corners=False)
        return self.final(torch.cat([x, rgb], dim=1))


class StageOne(nn.Module):
    """Encodeur, CFT multi-echelle, decodeur et tetes L / AB.

    Args:
        backbone: Configuration de l'encodeur.
        cft: Parametres du transfert.
        niveaux_cft: Indices des niveaux transferes (defaut : les deux plus
            grossiers).
        decodeurs_separes: Un decodeur par branche au lieu d'un partage.
        cft_branches: Branches qui recoivent la pyramide transferee
            (sous-ensemble de ``("L", "AB")`` ; les deux si le decodeur est
            partage).
    """

    def __init__(self, backbone: BackboneConfig, cft: CftConfig | None = None,
                 niveaux_cft: tuple[int, ...] | None = None,
                 decodeurs_separes: bool = False,
                 cft_branches: tuple[str, ...] = BRANCHES):
        super().__init__()
        n = len(backbone.strides)
        self.cfg_backbone = backbone
        self.cft = cft or CftConfig()
        self.niveaux_cft = tuple(niveaux_cft) if niveaux_cft is not None else (n - 2, n - 1)
        if any(not 0 <= i < n for i in self.niveaux_cft):
            raise ErreurConfiguration(f"Niveaux CFT invalides: {self.niveaux_cft}")
        if any(b not in BRANCHES for b in cft_branches):
            raise ErreurConfiguration(f"Branches CFT invalides: {cft_branches}")
        if not decodeurs_separes and set(cft_branches) != set(BRANCHES):
            raise ErreurConfiguration("Un decodeur partage recoit le CFT sur les deux branches")
        self.cft_branches = tuple(cft_branches)
        self.decodeurs_separes = decodeurs_separes

        self.backbone = construire_backbone(backbone)
        self.decodeur = Decodeur(backbone.largeurs)
        self.decodeur_ab = Decodeur(backbone.largeurs) if decodeurs_separes else None
        self.tete_l = nn.Conv2d(backbone.largeurs[0], 1, 3, padding=1)
        self.tete_ab = nn.Conv2d(backbone.largeurs[0], 2, 3, padding=1)
        nn.init.constant_(self.tete_l.bias, 0.5)

    def features(self, rgb: torch.Tensor) -> FeaturePyramid:
        return self.backbone(_completer(rgb, self.cfg_backbone.strides[-1]))

    def transferer(self, pyramide: FeaturePyramid,
                   matchsets: list[MatchSet] | None) -> FeaturePyramid:
        """Applique le CFT aux niveaux ``niveaux_cft``, un ``MatchSet`` par image."""
        if not matchsets:
            return pyramide
        for i in self.niveaux_cft:
            pyramide = pyramide.remplacer(
                i, apply_cft(pyramide.niveaux[i], pyramide.strides[i], matchsets, self.cft))
        return pyramide

    def forward(self, rgb: torch.Tensor, matchsets: list[MatchSet] | None = None) -> StageOneOutput:
        h, w = rgb.shape[-2:]
        entree = _completer(rgb, self.cfg_backbone.strides[-1])
        brute = self.backbone(entree)
        transferee = self.transferer(brute, matchsets)

        if self.decodeur_ab is None:
            x = self.decodeur(transferee, entree)
            x_l = x_ab = x
        else:
            x_l = self.decodeur(transferee if "L" in self.cft_branches else brute, entree)
            x_ab = self.decodeur_ab(transferee if "AB" in self.cft_branches else brute, entree)
        return StageOneOutput(self.tete_l(x_l)[..., :h, :w], self.tete_ab(x_ab)[..., :h, :w])


# =========================================================================
#  ETAPE 2
# =========================================================================

class DenseUNet(nn.Module):
    """Encodeur-decodeur a blocs denses, sortie logistique dans [0, 1]."""

    def __init__(self, cfg: UNetConfig, canaux_entree: int = 6, canaux_sortie: int = 3):
        super().__init__()
        self.cfg = cfg
        lg, g, c = cfg.largeurs, cfg.croissance, cfg.couches_dense
        self.encodeurs = nn.ModuleList()
        entree = canaux_entree
        for largeur in lg:
            self.encodeurs.append(BlocDense(entree, g, c, largeur))
            entree = largeur
        self.montees = nn.ModuleList()
        self.decodeurs = nn.ModuleList()
        for i in range(len(lg) - 2, -1, -1):
            self.montees.append(nn.ConvTranspose2d(lg[i + 1], lg[i], 2, stride=2))
            self.decodeurs.append(BlocDense(2 * lg[i], g, c, lg[i]))
        self.sortie = nn.Conv2d(lg[0], canaux_sortie, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        x = _completer(x, 2 ** (len(self.cfg.largeurs) - 1))
        sauts = []
        for i, enc in enumerate(self.encodeurs):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            sauts.append(x)
        for montee, dec, saut in zip(self.montees, self.decodeurs, reversed(sauts[:-1])):
            x = dec(torch.cat([montee(x), saut], dim=1))
        return torch.sigmoid(self.sortie(x))[..., :h, :w]


# =========================================================================
#  PIPELINE
# =========================================================================

class CANet(nn.Module):
    """Les deux etapes assemblees.

    Args:
        backbone: Encodeur de l'etape 1.
        unet: DenseUNet de l'etape 2.
        cft: Parametres du transfert.
        etape_un: ``False`` pour la variante DenseUNet seule (l'etape 2
            recoit alors le LAB de l'image ombree).
        **options: Transmis a ``StageOne`` (niveaux_cft, decodeurs_separes,
            cft_branches).
    """

    def __init__(self, backbone: BackboneConfig | None = None, unet: UNetConfig | None = None,
                 cft: CftConfig | None = None, etape_un: bool = True, **options):
        super().__init__()
        self.stage_un = StageOne(backbone or BackboneConfig(), cft, **options) if etape_un else None
        self.stage_deux = DenseUNet(unet or UNetConfig())

    @property
    def etape_un(self) -> bool:
        return self.stage_un is not None

    def backbone_features(self, rgb: torch.Tensor) -> FeaturePyramid:
        if self.stage_un is None:
            raise ErreurConfiguration("Variante sans etape 1 : pas de pyramide")
        return self.stage_un.features(rgb)

    def stage_one(self, rgb: torch.Tensor, matchsets: list[MatchSet] | None = None) -> StageOneOutput:
        if self.stage_un is None:
            raise ErreurConfiguration("Variante sans etape 1")
        return self.stage_un(rgb, matchsets)

    def stage_two(self, l_hat: torch.Tensor, ab_hat: torch.Tensor, rgb: torch.Tensor) -> torch.Tensor:
        if not (l_hat.shape[-2:] == ab_hat.shape[-2:] == rgb.shape[-2:]):
            raise ErreurValidation("Entrees de l'etape 2 de tailles differentes")
        return self.stage_deux(torch.cat([l_hat, ab_hat, rgb], dim=1))

    def forward(self, rgb: torch.Tensor, matchsets: list[MatchSet] | None = None,
                lab_ombre: torch.Tensor | None = None) -> tuple[StageOneOutput | None, torch.Tensor]:
        if self.stage_un is None:
            if lab_ombre is None:
                raise ErreurValidation("LAB de l'image ombree requis sans etape 1")
            return None, self.stage_two(lab_ombre[:, :1], lab_ombre[:, 1:], rgb)
        sortie1 = self.stage_un(rgb, matchsets)
        return sortie1, self.stage_two(sortie1.l_hat, sortie1.ab_hat, rgb)


def tenseurs_image(img: ImagePlane) -> tuple[torch.Tensor, torch.Tensor]:
    """(RGB 1 x 3 x H x W, LAB normalise 1 x 3 x H x W) d'une image."""
    lab = torch.from_numpy(lab_normalise(img).transpose(2, 0, 1).copy()).float().unsqueeze(0)
    return img.vers_tenseur(), lab


# =========================================================================
#  PERTE
# =========================================================================

def _initialiser(module: nn.Module, graine: int):
    g = torch.Generator().manual_seed(graine)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()


class ExtracteurAleatoire(nn.Module):
    """4 convolutions a poids aleatoires figes (graine fixe)."""

    def __init__(self, graine: int = 0):
        super().__init__()
        self.couches = nn.ModuleList([
            nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(32, 32, 3, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU()),
        ])
        _initialiser(self, graine)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> list[torch.Tensor]:
        sorties = []
        for couche in self.couches:
            x = couche(x)
            sorties.append(x)
        return sorties


class ExtracteurVgg19(nn.Module):
    """Activations relu1_2, relu2_2, relu3_4 et relu4_4 d'un VGG19 fige."""

    COUPES = (4, 9, 18, 27)

    def __init__(self, poids_imagenet: bool = True):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        poids = VGG19_Weights.IMAGENET1K_V1 if poids_imagenet else None
        couches = list(vgg19(weights=poids).features)[:self.COUPES[-1]]
        debut = 0
        blocs = []
        for fin in self.COUPES:
            blocs.append(nn.Sequential(*couches[debut:fin]))
            debut = fin
        self.blocs = nn.ModuleList(blocs)
        self.register_buffer("moyenne", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("ecart", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> list[torch.Tensor]:
        x = (x - self.moyenne) / self.ecart
        sorties = []
        for bloc in self.blocs:
            x = bloc(x)
            sorties.append(x)
        return sorties


def construire_extracteur(nom: str = "aleatoire", graine: int = 0) -> nn.Module:
    if nom == "aleatoire":
        return ExtracteurAleatoire(graine)
    if nom == "vgg19":
        return ExtracteurVgg19()
    raise ErreurConfiguration(f"Extracteur perceptuel inconnu: {nom} (attendu {EXTRACTEURS})")


@dataclass
class ComposantesCanet:
    total: torch.Tensor
    rem: torch.Tensor
    per: torch.Tensor
    grad: torch.Tensor
    details: dict = field(default_factory=dict)

    def en_dict(self) -> dict[str, float]:
        return {"total": float(self.total), "rem": float(self.rem),
                "per": float(self.per), "grad": float(self.grad)}


def _ecart_rem(a: torch.Tensor, b: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "mse":
        return F.mse_loss(a, b)
    return torch.linalg.vector_norm(a - b)


def canet_loss(sortie1: StageOneOutput | None, sortie2: torch.Tensor,
               gt_rgb: torch.Tensor, gt_lab: torch.Tensor | None,
               poids: LossWeights, extracteur: nn.Module,
               mode_rem: str = "norme", etape_un_dans_rem: bool = True) -> ComposantesCanet:
    """Perte composite.

    Args:
        sortie1: Sortie de l'etape 1 (``None`` sans etape 1).
        sortie2: RGB final N x 3 x H x W.
        gt_rgb: Verite terrain RGB.
        gt_lab: Verite terrain en LAB normalise (requise si l'etape 1
            compte dans L_rem).
        poids: Ponderations des trois termes.
        extracteur: Reseau perceptuel (liste de cartes en sortie).
        mode_rem: ``"norme"`` (racine de la somme des carres, defaut) ou
            ``"mse"`` (moyenne des carres).
        etape_un_dans_rem: Ajoute l'ecart LAB de l'etape 1 a L_rem.

    Returns:
        ``ComposantesCanet``, total = somme ponderee exacte des termes.
    """
    if mode_rem not in MODES_REM:
        raise ErreurConfiguration(f"Mode L_rem inconnu: {mode_rem}")
    if sortie2.shape != gt_rgb.shape:
        raise ErreurValidation(f"Formes differentes: {tuple(sortie2.shape)} / {tuple(gt_rgb.shape)}")

    rem2 = _ecart_rem(gt_rgb, sortie2, mode_rem)
    rem1 = torch.zeros_like(rem2)
    if sortie1 is not None and etape_un_dans_rem:
        if gt_lab is None or gt_lab.shape != sortie1.lab_recombined.shape:
            raise ErreurValidation("LAB de verite terrain absent ou de forme differente")
        rem1 = _ecart_rem(gt_lab, sortie1.lab_recombined, mode_rem)
    rem = rem1 + rem2

    per = torch.zeros_like(rem2)
    for fa, fb in zip(extracteur(gt_rgb), extracteur(sortie2)):
        per = per + (fa - fb).abs().mean()

    gx_a, gy_a = gradient_tenseur(gt_rgb)
    gx_b, gy_b = gradient_tenseur(sortie2)
    grad = (gx_a - gx_b).abs().mean() + (gy_a - gy_b).abs().mean()

    total = poids.lambda_rem * rem + poids.lambda_per * per + poids.lambda_grad * grad
    return ComposantesCanet(total, rem, per, grad, {"rem_etape1": rem1, "rem_etape2": rem2})
