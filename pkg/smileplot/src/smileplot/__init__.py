"""Figure rendering for fit tables produced by the sigvol CLI."""

from smileplot.plot import (
    SchemaError,
    build_smile_figure,
    build_term_structure_figure,
    figure_hash,
    main,
    plot_smiles,
    plot_term_structure,
    read_futures_fits,
    read_quote_fits,
)

__all__ = [
    "SchemaError",
    "build_smile_figure",
    "build_term_structure_figure",
    "figure_hash",
    "main",
    "plot_smiles",
    "plot_term_structure",
    "read_futures_fits",
    "read_quote_fits",
]
