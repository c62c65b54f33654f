"""Static SVG rendering of result CSVs.  Plots are conveniences only."""
from __future__ import annotations

import warnings

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigError  # noqa: E402
from ._io import read_csv  # noqa: E402

KINDS = ("lines", "scatter", "vector-field")


def _numeric(header, rows, path):
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError:
        raise ConfigError(f"{path}: non-numeric or ragged rows", field="csv") from None
    return {h: data[:, k] for k, h in enumerate(header)}


def _need(cols, names, kind):
    missing = [n for n in names if n not in cols]
    if missing:
        raise ConfigError(f"{kind} plot needs columns {missing}", field="csv")


def plot_csv(csv_path, kind, out_path, title=None):
    """Render ``csv_path`` as an SVG at ``out_path``.

    Parameters
    ----------
    kind : {"lines", "scatter", "vector-field"}
        ``lines`` plots every column against ``t`` (columns ending in
        ``_closed_form`` dashed); ``scatter`` plots ``x_0`` vs ``x_1``;
        ``vector-field`` draws arrows ``(J_0, J_1)`` at ``(x_0, x_1)``.

    Raises
    ------
    ConfigError
        If the CSV does not have the columns ``kind`` needs.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; expected one of {KINDS}", field="kind")
    header, rows = read_csv(csv_path)
    plt.rcParams["svg.hashsalt"] = "difflab"
    fig, ax = plt.subplots(figsize=(6, 4))
    if not rows:
        warnings.warn(f"{csv_path} has no data rows; writing empty axes", stacklevel=2)
    else:
        if "path_id" in header or "check" in header or "variant" in header or "case" in header:
            drop = {"path_id", "check", "variant", "case"}
            keep = [k for k, h in enumerate(header) if h not in drop]
            rows = [[r[k] for k in keep] for r in rows]
            header = [header[k] for k in keep]
        cols = _numeric(header, rows, csv_path)
        if kind == "lines":
            _need(cols, ["t"], kind)
            for name, y in cols.items():
                if name == "t" or name.startswith(("se_", "n_")):
                    continue
                style = "--" if name.endswith("_closed_form") else "-"
                ax.plot(cols["t"], y, style, label=name)
            ax.set_xlabel("t")
            if len(cols) > 1:
                ax.legend(fontsize="small")
        elif kind == "scatter":
            _need(cols, ["x_0", "x_1"], kind)
            ax.scatter(cols["x_0"], cols["x_1"], s=4)
            ax.set_xlabel("x_0")
            ax.set_ylabel("x_1")
        else:
            _need(cols, ["x_0", "x_1", "J_0", "J_1"], kind)
            ax.quiver(cols["x_0"], cols["x_1"], cols["J_0"], cols["J_1"])
            ax.set_xlabel("x_0")
            ax.set_ylabel("x_1")
    if title:
        ax.set_title(title)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
