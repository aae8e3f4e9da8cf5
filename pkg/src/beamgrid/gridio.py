"""File formats: binary grid rasters, path CSVs, run configs, models,
reports, and portable graymaps.

Grid raster ("BGRD1"): one ASCII header line `BGRD1 <rows> <cols> <channels>
<dtype>` with dtype f32 or u8, a single newline, then the little-endian
row-major channel-minor payload. Round-trips are bit-exact.

Path CSV: header `pixel_row,pixel_col,c,psi,aod_az,aod_el,aoa_az`, one row
per path, angles in radians, amplitudes linear. Floats are written with
repr so parsing reproduces the exact doubles.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .channel import ArrayFrame
from .errors import GridParseError
from .metrics import EvalReport, LinkBudget
from .predictor import FEATURE_VERSION, SoftmaxModel, TrainConfig
from .scene import CityStyle, SceneChannels, SceneConfig, TxSite

GRID_MAGIC = b"BGRD1"
MODEL_MAGIC = b"BGMDL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
PATH_HEADER = "pixel_row,pixel_col,c,psi,aod_az,aod_el,aoa_az"


def grid_to_bytes(array, dtype="f32"):
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"grids are (rows, cols[, channels]); got shape {arr.shape}")
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    rows, cols, ch = arr.shape
    header = f"BGRD1 {rows} {cols} {ch} {dtype}\n".encode("ascii")
    return header + np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes()


def grid_from_bytes(data):
    if not data.startswith(GRID_MAGIC):
        raise GridParseError(
            f"bad magic at byte offset 0: expected {GRID_MAGIC!r}, got {data[:5]!r}")
    nl = data.find(b"\n")
    if nl < 0:
        raise GridParseError(f"header newline missing within {len(data)} bytes")
    try:
        tokens = data[:nl].decode("ascii").split()
        _, rows, cols, ch, dtype = tokens
        rows, cols, ch = int(rows), int(cols), int(ch)
        itemsize = _DTYPES[dtype].itemsize
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise GridParseError(f"malformed header before byte offset {nl}: {exc}") from exc
    expected = rows * cols * ch * itemsize
    payload = data[nl + 1:]
    if len(payload) != expected:
        raise GridParseError(
            f"payload at byte offset {nl + 1}: expected {expected} bytes, "
            f"got {len(payload)}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(rows, cols, ch)
    return arr.copy()


def write_grid(path, array, dtype="f32"):
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(array, dtype))


def read_grid(path):
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())


def write_paths_csv(path, channels):
    """Write a SceneChannels path table; row order is pixel-major with the
    tracer's per-pixel path order preserved."""
    pixel = channels.pixel_ids()
    rows = pixel // channels.cols
    cols = pixel % channels.cols
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(PATH_HEADER + "\n")
        for i in range(channels.n_paths):
            fh.write(f"{rows[i]},{cols[i]},{float(channels.magnitude[i])!r},"
                     f"{float(channels.phase[i])!r},{float(channels.aod_azimuth[i])!r},"
                     f"{float(channels.aod_elevation[i])!r},{float(channels.aoa_azimuth[i])!r}\n")


def read_paths_csv(path, rows, cols, rx_height_m=1.5):
    """Parse a path table back into SceneChannels (no direct-path metadata)."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != PATH_HEADER:
            raise GridParseError(
                f"path file header mismatch at byte offset 0: {header!r}")
        pr, pc, vals = [], [], [[], [], [], [], []]
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise GridParseError(f"line {lineno}: expected 7 fields, got {len(parts)}")
            try:
                r, c = int(parts[0]), int(parts[1])
                nums = [float(x) for x in parts[2:]]
            except ValueError as exc:
                raise GridParseError(f"line {lineno}: {exc}") from exc
            if not (0 <= r < rows and 0 <= c < cols):
                raise GridParseError(
                    f"line {lineno}: pixel ({r},{c}) outside the {rows}x{cols} grid")
            pr.append(r)
            pc.append(c)
            for v, x in zip(vals, nums):
                v.append(x)
    pixel = np.asarray(pr, dtype=np.int64) * cols + np.asarray(pc, dtype=np.int64)
    counts = np.bincount(pixel, minlength=rows * cols)
    order = np.argsort(pixel, kind="stable")  # group by pixel, keep file order
    offsets = np.zeros(rows * cols + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    arrs = [np.asarray(v, dtype=np.float64)[order] for v in vals]
    return SceneChannels(
        rows=rows, cols=cols, rx_height_m=rx_height_m,
        counts=counts.reshape(rows, cols), offsets=offsets,
        magnitude=arrs[0], phase=arrs[1], aod_azimuth=arrs[2],
        aod_elevation=arrs[3], aoa_azimuth=arrs[4])


def write_pgm(path, gray):
    """Binary portable graymap (P5) from a uint8 array."""
    arr = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class SceneSection:
    rows: int = 64
    cols: int = 64
    seed: int = 0
    resolution_m: float = 1.0
    rx_height_m: float = 1.5
    carrier_hz: float = 3.9e9
    reflection_loss_db: float = 6.0
    vegetation_db_per_m: float = 0.5
    max_reflections: int = 1
    tx_mast_m: float = 2.0
    building_fraction: float = 0.3
    vegetation_fraction: float = 0.08
    street_width: int = 5
    block_size: int = 14
    building_height_min: float = 6.0
    building_height_max: float = 30.0
    vegetation_height_min: float = 2.0
    vegetation_height_max: float = 10.0

    def scene_config(self):
        return SceneConfig(carrier_hz=self.carrier_hz,
                           reflection_loss_db=self.reflection_loss_db,
                           vegetation_db_per_m=self.vegetation_db_per_m,
                           max_reflections=self.max_reflections,
                           tx_mast_m=self.tx_mast_m, seed=self.seed)

    def city_style(self):
        return CityStyle(
            building_fraction=self.building_fraction,
            vegetation_fraction=self.vegetation_fraction,
            street_width=self.street_width, block_size=self.block_size,
            building_height_range=(self.building_height_min, self.building_height_max),
            vegetation_height_range=(self.vegetation_height_min, self.vegetation_height_max))


@dataclass
class CodebookSection:
    Na: int = 8
    Ne: int = 4
    Nr: int = 4
    tx_weights: str | None = None  # optional custom beam weight file

    @property
    def dims(self):
        return (self.Na, self.Ne, self.Nr)


@dataclass
class LossSection:
    kind: str = "CE"
    sep: bool = False
    epsilon: float | None = None
    floor_db: float = -30.0


@dataclass
class TrainSection:
    lr: float = 0.3
    epochs: int = 150
    batch: int = 128
    lr_decay: float = 0.5
    patience: int = 10
    seed: int = 0

    def train_config(self):
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch,
                           lr_decay=self.lr_decay, patience=self.patience)


@dataclass
class EvalSection:
    k_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    budget: LinkBudget = field(default_factory=LinkBudget)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTIONS = {"scene": SceneSection, "codebook": CodebookSection,
             "budget": LinkBudget, "loss": LossSection,
             "train": TrainSection, "eval": EvalSection}


def parse_config(doc):
    """Build a RunConfig from a JSON document dict; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise GridParseError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise GridParseError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise GridParseError(f"config section {name!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise GridParseError(f"unknown key(s) in config section {name!r}: {sorted(bad)}")
        kwargs[name] = cls(**section)
    return RunConfig(**kwargs)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GridParseError(f"config {path}: invalid JSON at offset {exc.pos}") from exc
    return parse_config(doc)


def save_config(path, config):
    doc = {name: asdict(getattr(config, name)) for name in _SECTIONS}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# codebooks: JSON keeps the exact doubles, so unitarity survives the trip

def save_codebook(path, codebook):
    doc = {"na": codebook.na, "ne": codebook.ne, "nr": codebook.nr}
    for name, m in (("azimuth", codebook.tx_azimuth),
                    ("elevation", codebook.tx_elevation)):
        doc[f"{name}_re"] = m.real.tolist()
        doc[f"{name}_im"] = m.imag.tolist()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_codebook(path):
    from .channel import Codebook

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        az = np.asarray(doc["azimuth_re"]) + 1j * np.asarray(doc["azimuth_im"])
        el = np.asarray(doc["elevation_re"]) + 1j * np.asarray(doc["elevation_im"])
        return Codebook(az, el, int(doc["nr"]))
    except KeyError as exc:
        raise GridParseError(f"codebook file {path} lacks key {exc}") from exc


def codebook_from_config(cfg):
    """The configured codebook: custom transmit weights when the config
    names a weight file, the discrete-Fourier default otherwise."""
    from .channel import dft_codebook

    if cfg.codebook.tx_weights:
        cb = load_codebook(cfg.codebook.tx_weights)
        if (cb.na, cb.ne, cb.nr) != cfg.codebook.dims:
            raise GridParseError(
                f"codebook file dims {(cb.na, cb.ne, cb.nr)} do not match "
                f"the configured {cfg.codebook.dims}")
        return cb
    return dft_codebook(*cfg.codebook.dims)


# ---------------------------------------------------------------------------
# transmitter site

def tx_site_to_dict(tx):
    return {"pixel": [int(tx.pixel[0]), int(tx.pixel[1])],
            "height_m": float(tx.height_m),
            "boresight_azimuth": float(tx.frame.boresight_azimuth),
            "downtilt": float(tx.frame.downtilt)}


def tx_site_from_dict(doc):
    return TxSite(pixel=(int(doc["pixel"][0]), int(doc["pixel"][1])),
                  height_m=float(doc["height_m"]),
                  frame=ArrayFrame(float(doc["boresight_azimuth"]),
                                   float(doc["downtilt"])))


def save_tx_site(path, tx):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tx_site_to_dict(tx), fh, indent=2)
        fh.write("\n")


def load_tx_site(path):
    with open(path, "r", encoding="utf-8") as fh:
        return tx_site_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# model files: one JSON header line, then the weight grid (bias in last row)

def save_model(path, model):
    header = {
        "magic": MODEL_MAGIC.decode("ascii"),
        "dims": list(model.dims),
        "loss_kind": model.loss_kind,
        "sep": bool(model.sep),
        "seed": int(model.seed),
        "epsilon": model.epsilon,
        "floor_db": model.floor_db,
        "feature_version": FEATURE_VERSION,
        "features": int(model.weights.shape[0]),
        "outputs": int(model.weights.shape[1]),
    }
    stacked = np.vstack([model.weights, model.bias[None, :]])
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(grid_to_bytes(stacked, "f32"))


def load_model(path):
    with open(path, "rb") as fh:
        head_line = fh.readline()
        rest = fh.read()
    try:
        header = json.loads(head_line.decode("ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise GridParseError(f"model header at byte offset 0: {exc}") from exc
    if header.get("magic") != MODEL_MAGIC.decode("ascii"):
        raise GridParseError("model header magic mismatch at byte offset 0")
    if header.get("feature_version") != FEATURE_VERSION:
        raise GridParseError(
            f"model feature schema v{header.get('feature_version')} "
            f"does not match v{FEATURE_VERSION}")
    stacked = grid_from_bytes(rest)[:, :, 0].astype(np.float64)
    return SoftmaxModel(weights=stacked[:-1], bias=stacked[-1],
                        dims=tuple(header["dims"]), loss_kind=header["loss_kind"],
                        sep=bool(header["sep"]), seed=int(header["seed"]),
                        epsilon=header.get("epsilon"),
                        floor_db=float(header.get("floor_db", -30.0)))


def is_model_file(path):
    with open(path, "rb") as fh:
        head = fh.read(len(MODEL_MAGIC) + 16)
    return MODEL_MAGIC in head[:32]


# ---------------------------------------------------------------------------
# evaluation reports

def report_to_dict(report):
    return {"schema": "beamgrid-report-v1",
            "k_list": [int(k) for k in report.k_list],
            "accuracy": [float(a) for a in report.accuracy],
            "tpr": [float(t) for t in report.tpr],
            "samples": int(report.samples),
            "excluded": int(report.excluded)}


def save_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")


def load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return EvalReport(k_list=doc["k_list"], accuracy=doc["accuracy"],
                      tpr=doc["tpr"], samples=doc["samples"],
                      excluded=doc["excluded"])


def render_table(report):
    """Aligned text table of accuracy and throughput ratio per k."""
    ks = report.k_list
    head = "metric   " + "".join(f"  top-{k:<5d}" for k in ks)
    acc = "accuracy " + "".join(f"  {a:8.4f} " for a in report.accuracy)
    tpr = "tpr      " + "".join(f"  {t:8.4f} " for t in report.tpr)
    info = f"samples: {report.samples}   excluded: {report.excluded}"
    return "\n".join([head, acc, tpr, info])
