"""Figure rendering for CLI reports; matplotlib is imported only when asked for."""

from __future__ import annotations

from typing import Mapping, Sequence

from .errors import ConfigurationError


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigurationError(
            "--plot needs matplotlib; install the optional extra: pip install 'artifact[plot]'"
        ) from exc
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


def line_plot(path: str, series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
              xlabel: str, ylabel: str, title: str, step: bool = False, logy: bool = False) -> str:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, (xs, ys) in series.items():
        if step:
            ax.step(xs, ys, where="post", label=label)
        else:
            ax.plot(xs, ys, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def bar_plot(path: str, labels: Sequence[str], values: Sequence[float], errors: Sequence[float] | None,
             ylabel: str, title: str) -> str:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.bar(list(labels), list(values), yerr=None if errors is None else list(errors), capsize=6)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
