"""INI run configuration shared by all CLI commands.

Every key has a default, so an empty file is a valid configuration. Values
given on the command line override the file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .milr import MilrConfig
from .nn import EncoderConfig
from .protonet import ProtonetConfig

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "output_dir": "out", "run_id": "default"},
    "dataset": {
        "n_classes": "10",
        "samples_per_class": "40",
        "image_size": "32",
        "noise_level": "0.5",
        "image_folder": "",
    },
    "encoder": {"stem_channels": "16", "block_channels": "16, 32, 64", "tap_index": "0"},
    "protonet": {"episodes": "2000", "n_way": "5", "k_shot": "1", "n_query": "5", "lr": "0.001"},
    "milr": {
        "alpha_weight": "1.0",
        "beta_weight": "0.01",
        "episodes": "1000",
        "lr": "0.001",
        "score_dim": "64",
        "bottleneck_dim": "32",
        "hidden": "128",
        "head_hidden": "128",
        "mask_hidden": "32",
        "mask_init": "2.0",
    },
    "viz": {
        "blend": "0.5",
        "contrast_batches": "4",
        "contrast_size": "30",
        "n_samples": "5",
        "sample_ids": "",
    },
    "calibrate": {"rhos": "0.0, 0.25, 0.5, 0.75, 0.9", "steps": "3000", "vib_steps": "2000"},
}


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


@dataclass
class DatasetSection:
    n_classes: int = 10
    samples_per_class: int = 40
    image_size: int = 32
    noise_level: float = 0.5
    image_folder: str = ""


@dataclass
class VizSection:
    blend: float = 0.5
    contrast_batches: int = 4
    contrast_size: int = 30
    n_samples: int = 5
    sample_ids: list[int] = field(default_factory=list)


@dataclass
class CalibrateSection:
    rhos: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 0.9])
    steps: int = 3000
    vib_steps: int = 2000


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    run_id: str = "default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    protonet: ProtonetConfig = field(default_factory=ProtonetConfig)
    milr: MilrConfig = field(default_factory=MilrConfig)
    viz: VizSection = field(default_factory=VizSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    parser: configparser.ConfigParser | None = field(default=None, repr=False, compare=False)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def validate(self) -> "RunConfig":
        d, v, p = self.dataset, self.viz, self.protonet
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if not self.run_id or "/" in self.run_id or self.run_id in (".", ".."):
            raise ConfigError(f"run_id {self.run_id!r} is not a plain directory name")
        if not d.image_folder:
            if not 5 <= d.n_classes <= 30:
                raise ConfigError(f"dataset.n_classes {d.n_classes} outside [5, 30]")
            if d.samples_per_class < 1:
                raise ConfigError("dataset.samples_per_class must be positive")
            if not 0.0 <= d.noise_level <= 1.0:
                raise ConfigError(f"dataset.noise_level {d.noise_level} outside [0, 1]")
        elif not Path(d.image_folder).is_dir():
            raise ConfigError(f"dataset.image_folder {d.image_folder} is not a directory")
        self.encoder.validate()
        if p.episodes < 1 or p.n_way < 2 or p.k_shot < 1 or p.n_query < 1 or p.lr <= 0:
            raise ConfigError("protonet section: episodes, k_shot, n_query >= 1; n_way >= 2; lr > 0")
        self.milr.validate()
        if not 0.0 <= v.blend <= 1.0:
            raise ConfigError(f"viz.blend {v.blend} outside [0, 1]")
        if v.contrast_batches < 1 or v.contrast_size < 2 or v.n_samples < 1:
            raise ConfigError("viz section: contrast_batches >= 1, contrast_size >= 2, n_samples >= 1")
        if self.calibrate.steps < 1 or self.calibrate.vib_steps < 1:
            raise ConfigError("calibrate.steps and calibrate.vib_steps must be positive")
        if any(abs(r) >= 1 for r in self.calibrate.rhos):
            raise ConfigError("calibrate.rhos must lie strictly inside (-1, 1)")
        return self

    def to_ini(self) -> str:
        """The effective configuration (file values plus overrides) as INI text."""
        import io

        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()


def _parser(path=None, overrides: dict[str, dict[str, str]] | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        extra = configparser.ConfigParser(interpolation=None)
        try:
            extra.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc.message.splitlines()[0]}") from None
        for section in extra.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in extra.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                cp.set(section, key, value)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown setting {section}.{key}")
            cp.set(section, key, str(value))
    return cp


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    cp = _parser(path, overrides)
    try:
        run, ds, enc, pn, ml, vz, cal = (cp[s] for s in ("run", "dataset", "encoder", "protonet", "milr", "viz", "calibrate"))
        cfg = RunConfig(
            seed=run.getint("seed"),
            output_dir=run.get("output_dir"),
            run_id=run.get("run_id"),
            dataset=DatasetSection(ds.getint("n_classes"), ds.getint("samples_per_class"), ds.getint("image_size"),
                                   ds.getfloat("noise_level"), ds.get("image_folder").strip()),
            encoder=EncoderConfig(input_size=ds.getint("image_size"), stem_channels=enc.getint("stem_channels"),
                                  block_channels=_ints(enc.get("block_channels")), tap_index=enc.getint("tap_index"),
                                  repr_dim=_ints(enc.get("block_channels"))[-1] if enc.get("block_channels").strip() else 0),
            protonet=ProtonetConfig(pn.getint("episodes"), pn.getint("n_way"), pn.getint("k_shot"),
                                    pn.getint("n_query"), pn.getfloat("lr")),
            milr=MilrConfig(alpha_weight=ml.getfloat("alpha_weight"), beta_weight=ml.getfloat("beta_weight"),
                            episodes=ml.getint("episodes"), lr=ml.getfloat("lr"), score_dim=ml.getint("score_dim"),
                            bottleneck_dim=ml.getint("bottleneck_dim"), hidden=ml.getint("hidden"),
                            head_hidden=ml.getint("head_hidden"), mask_hidden=ml.getint("mask_hidden"),
                            mask_init=ml.getfloat("mask_init"), n_way=pn.getint("n_way"),
                            k_shot=pn.getint("k_shot"), n_query=pn.getint("n_query")),
            viz=VizSection(vz.getfloat("blend"), vz.getint("contrast_batches"), vz.getint("contrast_size"),
                           vz.getint("n_samples"), _ints(vz.get("sample_ids"))),
            calibrate=CalibrateSection(_floats(cal.get("rhos")), cal.getint("steps"), cal.getint("vib_steps")),
            parser=cp,
        )
    except ValueError as exc:
        raise ConfigError(f"bad value in configuration: {exc}") from None
    return cfg.validate()
