"""
Saliency plot data and its SVG rendering.

The JSON file is the contract; the SVG is a convenience view of the same numbers.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import IoFailure, MissingFile, MissingTrack
from .losses import ROLES

logger = logging.getLogger(__name__)

ROLE_LABELS = {
    "S_p": "positive",
    "S_hn1": "hard negative 1",
    "S_hn2": "hard negative 2",
    "S_hn3": "hard negative 3",
    "S_n": "easy negative",
}
ROLE_COLORS = {"S_p": "#1b7837", "S_hn1": "#5aae61", "S_hn2": "#fdb863", "S_hn3": "#e66101", "S_n": "#7f7f7f"}


def write_plot_data(data: Mapping[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    missing = [role for role in ROLES if role not in data.get("tracks", {})]
    if missing:
        raise MissingTrack(f"Plot data for {data.get('sample_id')} lacks {', '.join(missing)}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot write plot data {path}: {e}") from e
    return path


def read_plot_data(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return json.loads(path.read_text(encoding="utf-8"))


def render_svg(data: Mapping[str, Any], path: Union[str, Path]) -> Path:
    """One line per query role over clip index, with the ground-truth span shaded."""
    path = Path(path)
    start, end = data["span"]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.axvspan(start - 0.5, end - 0.5, color="#d9d9d9", alpha=0.6, label="ground truth")
    for role in ROLES:
        values = data["tracks"][role]
        label = f"{ROLE_LABELS[role]}: {data.get('queries', {}).get(role, '')}".rstrip(": ")
        ax.plot(range(len(values)), values, marker="o", markersize=2.5, linewidth=1.4,
                color=ROLE_COLORS[role], label=label)
    ax.set_xlabel("clip")
    ax.set_ylabel("saliency")
    ax.set_title(f"Saliency responses for {data['sample_id']}", fontsize=10)
    ax.legend(fontsize=6, loc="upper left", framealpha=0.9)
    plt.tight_layout()
    try:
        with plt.rc_context({"svg.hashsalt": data["sample_id"]}):
            fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise IoFailure(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.info(f"Saved {path}")
    return path
