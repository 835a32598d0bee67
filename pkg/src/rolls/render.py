"""Render grids and clouds to PLY point sets, PGM projections and matplotlib figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import PointCloud  # noqa: E402
from .metrics import extract_surface  # noqa: E402
from .occupancy import OccupancyGrid  # noqa: E402
from .pgm import to_gray, write_pgm  # noqa: E402

FIGURE_STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "image.cmap": "viridis",
}


def write_ply(path, points: np.ndarray, gray: np.ndarray | None = None) -> None:
    """ASCII PLY with float xyz and optional uchar grayscale RGB."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if gray is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    with open(Path(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")
        if gray is None:
            np.savetxt(fh, points, fmt="%.6f")
        else:
            g = np.asarray(gray, dtype=np.uint8).reshape(-1, 1)
            table = np.hstack([points, np.repeat(g, 3, axis=1)])
            np.savetxt(fh, table, fmt=["%.6f"] * 3 + ["%d"] * 3)


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, has_color, end = 0, False, None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line.startswith("property uchar red"):
            has_color = True
        elif line == "end_header":
            end = i
            break
    if end is None:
        raise ValueError(f"{path}: PLY header has no end_header")
    width = 6 if has_color else 3
    rows = np.array([r.split() for r in text[end + 1 : end + 1 + n]], dtype=np.float64).reshape(n, width)
    return rows[:, :3], (rows[:, 3].astype(np.uint8) if has_color else None)


def max_projections(grid: OccupancyGrid) -> dict[str, np.ndarray]:
    """Max probability along each axis; rows are the vertical image axis.

    ``top`` is ``(nx, ny)`` (max over Z), ``front`` is ``(nz, ny)`` (max over X)
    and ``side`` is ``(nz, nx)`` (max over Y).
    """
    p = grid.probs
    return {"top": p.max(axis=0), "front": p.max(axis=1), "side": p.max(axis=2)}


def render_grid(grid: OccupancyGrid, out_dir, name: str = "grid", threshold: float = 0.5,
                figure: bool = True) -> list[Path]:
    """Surface voxel PLY (grey = probability), per-axis PGM max projections and a PNG panel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    surf = extract_surface(grid, threshold)
    cells = grid.spec.cell_coords(surf.points)
    probs = grid.probs[cells[:, 2], cells[:, 0], cells[:, 1]] if len(cells) else np.zeros(0)
    written = [out_dir / f"{name}.ply"]
    write_ply(written[0], surf.points, np.rint(255 * probs).astype(np.uint8))
    proj = max_projections(grid)
    for axis, image in proj.items():
        path = out_dir / f"{name}_{axis}.pgm"
        write_pgm(path, to_gray(image, lo=0.0, hi=1.0))
        written.append(path)
    if figure:
        written.append(_projection_figure(grid, proj, out_dir / f"{name}.png", name, threshold))
    return written


def top_height(grid: OccupancyGrid, threshold: float = 0.5) -> np.ndarray:
    """Z of the highest occupied voxel center per column, NaN for empty columns."""
    occ = grid.probs >= threshold
    nz = occ.shape[0]
    top = nz - 1 - np.argmax(occ[::-1], axis=0)
    z = grid.spec.z_range[0] + (top + 0.5) * grid.spec.voxel[2]
    return np.where(occ.any(axis=0), z, np.nan)


def _projection_figure(grid, proj, path, title, threshold) -> Path:
    s = grid.spec
    extents = {
        "top": (s.y_range[0], s.y_range[1], s.x_range[0], s.x_range[1]),
        "front": (s.y_range[0], s.y_range[1], s.z_range[0], s.z_range[1]),
        "side": (s.x_range[0], s.x_range[1], s.z_range[0], s.z_range[1]),
    }
    labels = {"top": ("y [m]", "x [m]"), "front": ("y [m]", "z [m]"), "side": ("x [m]", "z [m]")}
    with plt.rc_context(FIGURE_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.8), layout="constrained",
                                 gridspec_kw={"width_ratios": [1, 1.3, 1.3]})
        hm = axes[0].imshow(top_height(grid, threshold), origin="lower", extent=extents["top"],
                            cmap="terrain", vmin=s.z_range[0], vmax=s.z_range[1], interpolation="nearest")
        axes[0].set_title(f"{title}: top surface height")
        fig.colorbar(hm, ax=axes[0], shrink=0.9, label="z [m]")
        for ax, key in zip(axes[1:], ("front", "side")):
            im = ax.imshow(proj[key], origin="lower", extent=extents[key], vmin=0, vmax=1,
                           aspect="auto", interpolation="nearest")
            ax.set_title(f"{title}: {key} projection")
        for ax, key in zip(axes, ("top", "front", "side")):
            ax.set_xlabel(labels[key][0])
            ax.set_ylabel(labels[key][1])
        fig.colorbar(im, ax=axes[1:], shrink=0.9, label="max occupancy probability")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def render_cloud(cloud: PointCloud, out_dir, name: str = "cloud", figure: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / f"{name}.ply"]
    write_ply(written[0], cloud.points)
    if figure:
        path = out_dir / f"{name}.png"
        with plt.rc_context(FIGURE_STYLE):
            fig, ax = plt.subplots(figsize=(5, 5))
            pts = cloud.points
            sc = ax.scatter(pts[:, 1], pts[:, 0], c=pts[:, 2], s=1.5, linewidths=0)
            ax.set_xlabel("y [m]")
            ax.set_ylabel("x [m]")
            ax.set_aspect("equal")
            ax.set_title(f"{name}: {len(cloud)} points, bird's-eye view")
            if len(pts):
                fig.colorbar(sc, ax=ax, label="z [m]")
            fig.savefig(path)
            plt.close(fig)
        written.append(path)
    return written


def plot_loss_curve(history_rows: list[dict], path, title: str = "training loss") -> Path:
    with plt.rc_context(FIGURE_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        it = [r["iteration"] for r in history_rows]
        for key, style in (("total", "-"), ("l1", ":"), ("l2", "--"), ("occ", "-.")):
            vals = [r.get(key) for r in history_rows]
            if any(v is not None for v in vals):
                ax.plot(it, vals, style, label=key, lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_metrics(rows: dict[str, dict], path) -> Path:
    """Grouped bars of CD / NFCD / AR / L2 for several labelled reports."""
    cols = ("cd", "nfcd", "ar", "l2")
    with plt.rc_context(FIGURE_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        width = 0.8 / max(len(rows), 1)
        for n, (label, rep) in enumerate(rows.items()):
            vals = [rep.get(c) or 0.0 for c in cols]
            ax.bar(np.arange(len(cols)) + n * width, vals, width, label=label)
        ax.set_xticks(np.arange(len(cols)) + 0.4 - width / 2)
        ax.set_xticklabels([c.upper() for c in cols])
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
