"""Export PDF des rapports d'evaluation.

Une page A4 portrait par document :
    - cartouche (titre, date, metrique, agregation) ;
    - tableau de synthese S / N / A, une ligne par variante ;
    - ecarts par canal L / A / B si fournis ;
    - puis le detail par image de chaque variante (pages suivantes si
      necessaire).
"""

from __future__ import annotations

from datetime import datetime
from pathlib import Path

from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.units import mm
from reportlab.pdfgen import canvas

from .evaluation import ChannelGapStats, RapportEvaluation

MARGE = 15 * mm
HAUTEUR_LIGNE = 5.5 * mm
TAILLE_POLICE = 8
FOND_ENTETE = colors.Color(0.2, 0.2, 0.2)
FOND_ALTERNE = colors.Color(0.95, 0.95, 0.95)


def _valeur(v) -> str:
    return "-" if v is None else f"{v:.2f}"


class _Page:
    """Curseur vertical sur le canvas, avec saut de page automatique."""

    def __init__(self, c: canvas.Canvas):
        self.c = c
        self.largeur, self.hauteur = A4
        self.y = self.hauteur - MARGE

    def reserver(self, hauteur: float):
        if self.y - hauteur < MARGE:
            self.c.showPage()
            self.y = self.hauteur - MARGE

    def titre(self, texte: str, taille: float = 10):
        self.reserver(taille + 6)
        self.c.setFont("Helvetica-Bold", taille)
        self.c.setFillColor(colors.black)
        self.c.drawString(MARGE, self.y - taille, texte)
        self.y -= taille + 6

    def tableau(self, colonnes: list[tuple[str, float]], lignes: list[list[str]]):
        """En-tete sombre, lignes alternees, grille fine ; coupe entre pages."""
        largeur = sum(lg for _, lg in colonnes)
        c = self.c

        def entete():
            c.setFillColor(FOND_ENTETE)
            c.rect(MARGE, self.y - HAUTEUR_LIGNE, largeur, HAUTEUR_LIGNE, fill=1, stroke=0)
            c.setFont("Helvetica-Bold", TAILLE_POLICE)
            c.setFillColor(colors.white)
            x = MARGE
            for nom, lg in colonnes:
                c.drawString(x + 2, self.y - HAUTEUR_LIGNE + 4, nom)
                x += lg
            self.y -= HAUTEUR_LIGNE

        self.reserver(2 * HAUTEUR_LIGNE)
        entete()
        c.setFont("Helvetica", TAILLE_POLICE)
        for i, ligne in enumerate(lignes):
            if self.y - HAUTEUR_LIGNE < MARGE:
                c.showPage()
                self.y = self.hauteur - MARGE
                entete()
                c.setFont("Helvetica", TAILLE_POLICE)
            if i % 2:
                c.setFillColor(FOND_ALTERNE)
                c.rect(MARGE, self.y - HAUTEUR_LIGNE, largeur, HAUTEUR_LIGNE, fill=1, stroke=0)
            c.setFillColor(colors.black)
            c.setStrokeColor(colors.grey)
            c.setLineWidth(0.3)
            c.line(MARGE, self.y - HAUTEUR_LIGNE, MARGE + largeur, self.y - HAUTEUR_LIGNE)
            x = MARGE
            for valeur, (_, lg) in zip(ligne, colonnes):
                c.drawString(x + 2, self.y - HAUTEUR_LIGNE + 4, valeur)
                x += lg
            self.y -= HAUTEUR_LIGNE
        self.y -= 4 * mm


def exporter_rapport_pdf(filepath: str | Path, rapports: list[RapportEvaluation],
                         titre: str = "Evaluation OmbreNet",
                         ecarts: ChannelGapStats | None = None,
                         details: bool = True) -> Path:
    """Genere le PDF d'un ou plusieurs rapports d'evaluation.

    Args:
        filepath: Chemin du PDF a generer.
        rapports: Rapports (une variante chacun).
        titre: Titre du cartouche.
        ecarts: Ecarts L / A / B du jeu, optionnels.
        details: Ajoute le tableau par image de chaque rapport.

    Returns:
        Chemin du fichier genere.
    """
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    c = canvas.Canvas(str(filepath), pagesize=A4)
    c.setTitle(titre)
    page = _Page(c)

    page.titre(titre, 12)
    c.setFont("Helvetica", TAILLE_POLICE)
    infos = [datetime.now().strftime("%d/%m/%Y %H:%M")]
    if rapports:
        infos += [f"metrique: {rapports[0].metrique}", f"agregation: {rapports[0].agregation}"]
    c.drawString(MARGE, page.y - TAILLE_POLICE, "  |  ".join(infos))
    page.y -= TAILLE_POLICE + 8 * mm

    page.titre("Synthese (S = ombre, N = hors ombre, A = image entiere)")
    page.tableau([("Variante", 60 * mm), ("S", 30 * mm), ("N", 30 * mm), ("A", 30 * mm)],
                 [[r.variante, _valeur(r.agregat.get("shadow")), _valeur(r.agregat.get("non_shadow")),
                   _valeur(r.agregat.get("all"))] for r in rapports])

    if ecarts is not None:
        page.titre(f"Ecarts dans l'ombre, image ombree / verite terrain ({ecarts.n_images} images)")
        page.tableau([("L", 30 * mm), ("A", 30 * mm), ("B", 30 * mm)],
                     [[_valeur(ecarts.l), _valeur(ecarts.a), _valeur(ecarts.b)]])

    if details:
        for r in rapports:
            page.titre(f"Detail : {r.variante}")
            page.tableau([("Image", 60 * mm), ("S", 25 * mm), ("N", 25 * mm), ("A", 25 * mm),
                          ("Pixels S", 25 * mm)],
                         [[nom, _valeur(x.shadow), _valeur(x.non_shadow), _valeur(x.all), str(x.n_shadow)]
                          for nom, x in r.images])

    c.save()
    return filepath
