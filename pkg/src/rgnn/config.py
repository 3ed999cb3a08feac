"""Experiment configuration: a flat, overridable key=value record.

One RunConfig drives model construction, training, and the CLI.  Files are
plain ``key=value`` lines with ``#`` comments; every key doubles as a CLI
flag of the same name.  The defaults are the desk-scale geometry: 32 px
images, two conv blocks to an 8x8x32 map, upsampled 3x to 24x24 so an
8 px cell gives the 3x3 grid and its 27 region proposals, pooled 7x7.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .regions import CellGrid, enumerate_regions, load_region_spec, uniform_grid_regions

_READOUTS = ("gated", "gap", "gmp", "gsum")


@dataclass(frozen=True)
class RunConfig:
    # data / geometry
    image_size: int = 32
    channels: int = 1
    conv_widths: tuple = (16, 32)
    upsample_factor: int = 3
    cell_size: int = 8
    min_cells: int = 2
    pool_w: int = 7
    pool_h: int = 7
    # graph transform
    gnn_dims: tuple = (48, 48)
    alpha: float = 0.3
    steps: int = 1
    edge_mode: str = "full"  # "full" or "overlap:<iou>"
    attn_dim: int = 8
    # task / training
    num_classes: int = 8
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_step: int = 15
    seed: int = 0
    crop_margin: int = 4
    rot_degrees: float = 15.0
    scale_jitter: float = 0.15
    # ablation switches
    no_gnn: bool = False
    no_refine: bool = False
    no_self_attention: bool = False
    no_weighted_attention: bool = False
    readout_kind: str = "gated"
    uniform_grid_g: int = 0  # 0 = use cell-based proposals
    region_file: str = ""    # explicit region list overrides enumeration
    train_projection: bool = False

    def __post_init__(self):
        for name in ("image_size", "channels", "upsample_factor", "cell_size",
                     "min_cells", "pool_w", "pool_h", "attn_dim", "num_classes",
                     "batch_size", "lr_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.crop_margin < 0 or self.uniform_grid_g < 0:
            raise ValueError("epochs, crop_margin, uniform_grid_g must be >= 0")
        if not self.conv_widths or not self.gnn_dims:
            raise ValueError("conv_widths and gnn_dims must be non-empty")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lr and lr_decay must be positive")
        if self.readout_kind not in _READOUTS:
            raise ValueError(f"readout_kind must be one of {_READOUTS}")
        if not (self.edge_mode == "full" or self.edge_mode.startswith("overlap:")):
            raise ValueError(f"bad edge_mode {self.edge_mode!r}")
        if self.image_size % (2 ** len(self.conv_widths)) != 0:
            raise ValueError("image_size must be divisible by 2^len(conv_widths)")
        if self.uniform_grid_g == 0 and not self.region_file:
            if self.map_size % self.cell_size != 0:
                raise ValueError(
                    f"upsampled map {self.map_size} not divisible by cell {self.cell_size}")

    # derived geometry --------------------------------------------------
    @property
    def backbone_out(self) -> int:
        return self.image_size // (2 ** len(self.conv_widths))

    @property
    def map_size(self) -> int:
        return self.backbone_out * self.upsample_factor

    @property
    def backbone_channels(self) -> int:
        return self.conv_widths[-1]

    @property
    def feature_dim(self) -> int:
        """Dimension of the transformed image descriptor."""
        return self.backbone_channels if self.no_gnn else self.gnn_dims[-1]

    @property
    def raw_image_size(self) -> int:
        return self.image_size + self.crop_margin

    def regions(self):
        if self.region_file:
            regs, map_size = load_region_spec(self.region_file)
            if map_size != self.map_size:
                raise ValueError(
                    f"region file map size {map_size} != config map {self.map_size}")
            return regs
        if self.uniform_grid_g:
            return uniform_grid_regions(self.uniform_grid_g, self.map_size)
        grid = CellGrid(self.map_size, self.cell_size)
        return enumerate_regions(grid, self.min_cells)

    def edge_params(self) -> tuple:
        if self.edge_mode == "full":
            return "full", 0.0
        return "overlap", float(self.edge_mode.split(":", 1)[1])


def paper_schedule(cfg: RunConfig) -> RunConfig:
    """The reference training schedule: 150 epochs, decay every 50."""
    return replace(cfg, epochs=150, lr_step=50)


# ---------------------------------------------------------------------------
# key=value (de)serialization
# ---------------------------------------------------------------------------

def _parse_value(name: str, text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(int(p) for p in text.split(",") if p.strip())
    return text


def config_from_items(items: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    kinds = {f.name: type(getattr(base, f.name)) for f in fields(RunConfig)}
    updates = {}
    for key, raw in items.items():
        if key not in kinds:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, str(raw), kinds[key])
    return replace(base, **updates)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    items = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            items[key.strip()] = value
    return config_from_items(items, base)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = f"{v:.17g}"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))
