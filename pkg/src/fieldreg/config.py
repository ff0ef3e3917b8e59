"""Run configuration: a JSON document checked against ``config_schema.json``."""

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .cnn.presets import preset
from .cnn.spec import NetworkSpec
from .errors import ConfigError, FieldRegError
from .plate import CASES, FemDefaults, InputSampler
from .seeds import stage_int_seed
from .train import TrainConfig


def load_schema():
    return json.loads(resources.files("fieldreg").joinpath("config_schema.json").read_text())


@dataclass
class RandomFieldConfig:
    sigma: float = 0.3
    corr_len: float = 0.5
    log_transform: bool = True
    nugget: float = 1e-10
    mean: float = 0.0
    amplitudes: dict = field(default_factory=dict)

    def amplitude(self, name):
        return float(self.amplitudes.get(name, self.sigma))


@dataclass
class DataConfig:
    n_train: int = 1024
    n_test: int = 200
    train_sampling: str = "lhs"
    test_sampling: str = "mc"


@dataclass
class NetworkConfig:
    preset: str = None
    stem_mode: str = "joint"
    layers: list = None


@dataclass
class UqConfig:
    n_samples: int = 100000
    chunk: int = 64
    probes: list = None
    ppm: bool = True


@dataclass
class PathsConfig:
    out_dir: str = "run"
    train_data: str = "train.frds"
    test_data: str = "test.frds"
    checkpoint: str = "model.frm1"


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class RunConfig:
    case: str
    grid_n: int = 64
    seed: int = 0
    random_field: RandomFieldConfig = field(default_factory=RandomFieldConfig)
    fem: FemDefaults = field(default_factory=FemDefaults)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: dict = field(default_factory=dict)
    uq: UqConfig = field(default_factory=UqConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def names_in(self):
        return list(CASES[self.case][0])

    @property
    def names_out(self):
        return list(CASES[self.case][1])

    def sampler(self):
        rf = self.random_field
        return InputSampler(
            self.case,
            self.grid_n,
            sigma_E=rf.amplitude("E"),
            sigma_f=rf.amplitude("f"),
            corr_len=rf.corr_len,
            log_transform=rf.log_transform,
            nugget=rf.nugget,
            mean=rf.mean,
            load=self.fem.load,
        )

    def network_spec(self):
        in_shape = (self.grid_n, self.grid_n, len(self.names_in))
        net = self.network
        if net.layers is not None:
            try:
                spec = NetworkSpec.from_dict({"in_shape": list(in_shape), "layers": net.layers})
                out = spec.out_shape
            except (FieldRegError, TypeError, KeyError) as exc:
                raise ConfigError(f"network.layers: {exc}") from exc
            if out != (self.grid_n, self.grid_n, len(self.names_out)):
                raise ConfigError(f"network.layers produce {out}, case {self.case} needs {self.grid_n}x{self.grid_n}x{len(self.names_out)}")
            return spec
        name = net.preset or ("FR21" if self.case == "one2one" else "FR25")
        try:
            spec = preset(name, in_shape, len(self.names_out), net.stem_mode)
            spec.shapes()
        except FieldRegError as exc:
            raise ConfigError(f"preset {name} cannot be built for grid {self.grid_n}: {exc}") from exc
        return spec

    def train_config(self):
        return TrainConfig(**self.train, seed=stage_int_seed(self.seed, "train")).validate()

    @property
    def init_seed(self):
        return stage_int_seed(self.seed, "init")

    def path(self, key, out_dir=None):
        base = Path(out_dir or self.paths.out_dir)
        p = Path(getattr(self.paths, key))
        return p if p.is_absolute() else base / p

    def to_dict(self):
        return asdict(self)


def _section(cls, raw, name):
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(doc):
    """Validate a decoded JSON document and build a RunConfig."""
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    case = doc["case"]
    names_in, names_out = CASES[case]
    if "inputs" in doc and list(doc["inputs"]) != list(names_in):
        raise ConfigError(f"case {case} takes inputs {list(names_in)}, config lists {doc['inputs']}")
    if "outputs" in doc and list(doc["outputs"]) != list(names_out):
        raise ConfigError(f"case {case} produces outputs {list(names_out)}, config lists {doc['outputs']}")
    amps = doc.get("random_field", {}).get("amplitudes", {})
    extra = set(amps) - set(names_in)
    if extra:
        raise ConfigError(f"amplitudes given for {sorted(extra)}, which case {case} does not take as input")
    train = dict(doc.get("train", {}))
    unknown = set(train) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"train: unknown keys {sorted(unknown)}")
    cfg = RunConfig(
        case=case,
        grid_n=doc.get("grid_n", 64),
        seed=doc.get("seed", 0),
        random_field=_section(RandomFieldConfig, doc.get("random_field", {}), "random_field"),
        fem=_section(FemDefaults, doc.get("fem", {}), "fem"),
        data=_section(DataConfig, doc.get("data", {}), "data"),
        network=_section(NetworkConfig, doc.get("network", {}), "network"),
        train=train,
        uq=_section(UqConfig, doc.get("uq", {}), "uq"),
        paths=_section(PathsConfig, doc.get("paths", {}), "paths"),
    )
    if cfg.train.get("channel_weights") is not None and len(cfg.train["channel_weights"]) != len(names_out):
        raise ConfigError(f"channel_weights needs {len(names_out)} entries for case {case}")
    if cfg.uq.probes is not None:
        for r, c, ch in cfg.uq.probes:
            if r >= cfg.grid_n or c >= cfg.grid_n or ch >= len(names_out):
                raise ConfigError(f"probe {(r, c, ch)} lies outside the {cfg.grid_n}x{cfg.grid_n}x{len(names_out)} output")
    try:
        cfg.train_config()
    except FieldRegError as exc:
        raise ConfigError(f"train: {exc}") from exc
    cfg.network_spec()
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc)
