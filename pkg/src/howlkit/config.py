"""Run configuration for the command-line tools.

A run config is a JSON object with one section per subsystem; every value
has a default equal to the corresponding library default, so an empty file
(or no file at all) reproduces the stock pipeline.  Unknown sections or keys
are rejected outright — a typo should fail loudly, not silently fall back.

Sections:
    seed      master seed for scene sampling and artifact generation
    stft      framing (see signals.StftConfig)
    fdkf      filter sizes and recursion constants (fdkf.FdkfConfig)
    detector  howling test (loop.HowlDetectorConfig)
    loop      scalar scene knobs: gain, delay, sat, duration
    neural    mask network size and wiring: mask_hidden, mask_scope,
              stop_grad_filter, seed
    trainer   training hyperparameters and sampling ranges
              (training.TrainConfig, minus the wiring keys above)
    paths     out_dir, checkpoint, corpus_dir
"""

import copy
import json
from dataclasses import asdict

from .fdkf import FdkfConfig
from .loop import HowlDetectorConfig
from .signals import ConfigError, StftConfig
from .training import SceneSampler, TrainConfig, make_default_nets

# trainer keys owned by the "neural" section instead
_WIRING_KEYS = ("mask_scope", "stop_grad_filter")


def default_config() -> dict:
    """The full schema with library defaults, JSON-serializable."""
    trainer = asdict(TrainConfig())
    neural = {
        "mask_hidden": [32, 32],
        "mask_scope": trainer.pop("mask_scope"),
        "stop_grad_filter": trainer.pop("stop_grad_filter"),
        "seed": 0,
    }
    for key, val in trainer.items():
        if isinstance(val, tuple):
            trainer[key] = list(val)
    return {
        "seed": 0,
        "stft": asdict(StftConfig()),
        "fdkf": asdict(FdkfConfig()),
        "detector": asdict(HowlDetectorConfig()),
        "loop": {"gain": 2.0, "delay": 0.2, "sat": 1.0, "duration": 4.0},
        "neural": neural,
        "trainer": trainer,
        "paths": {"out_dir": "runs", "checkpoint": None, "corpus_dir": None},
    }


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path!r} must be an object")
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value
    return base


class RunConfig:
    """Validated run configuration with builders for the library objects."""

    def __init__(self, data: dict = None):
        self.data = _merge(default_config(), data or {})
        # constructing the section objects validates their values eagerly
        stft = self.stft()
        fdkf = self.fdkf()
        self.detector()
        self.trainer()
        if fdkf.num_bins != stft.num_bins:
            raise ConfigError(
                f"fdkf.num_bins ({fdkf.num_bins}) must match the STFT bin "
                f"count ({stft.num_bins})")
        loop = self.data["loop"]
        if loop["gain"] < 0 or loop["delay"] <= 0 or loop["duration"] <= 0:
            raise ConfigError("loop gain must be >= 0 and delay/duration > 0")

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        return cls(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    # ------------------------------------------------------------------
    # section builders

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def stft(self) -> StftConfig:
        return StftConfig(**self.data["stft"])

    def fdkf(self) -> FdkfConfig:
        return FdkfConfig(**self.data["fdkf"])

    def detector(self) -> HowlDetectorConfig:
        return HowlDetectorConfig(**self.data["detector"])

    def trainer(self) -> TrainConfig:
        sec = dict(self.data["trainer"])
        for key, val in sec.items():
            if isinstance(val, list):
                sec[key] = tuple(val)
        neural = self.data["neural"]
        try:
            return TrainConfig(mask_scope=neural["mask_scope"],
                               stop_grad_filter=neural["stop_grad_filter"],
                               **sec)
        except ValueError as exc:
            raise ConfigError(f"trainer: {exc}") from exc

    def sampler(self, split: str, duration: float = None, seed: int = None,
                utterances=None) -> SceneSampler:
        """Scene sampler over the trainer's ranges, keyed by the master seed."""
        t = self.trainer()
        return SceneSampler(
            seed=self.seed if seed is None else seed, split=split,
            duration=t.duration if duration is None else duration,
            sample_rate=self.stft().sample_rate, utterances=utterances,
            gain_range=t.gain_range, delay_range=t.delay_range,
            rt60_range=t.rt60_range, coupling_range=t.coupling_range)

    def nets(self, seed: int = None) -> dict:
        neural = self.data["neural"]
        return make_default_nets(
            num_bins=self.stft().num_bins,
            mask_hidden=tuple(neural["mask_hidden"]),
            seed=neural["seed"] if seed is None else seed,
        )

    def loop_knobs(self) -> dict:
        return dict(self.data["loop"])

    def paths(self) -> dict:
        return dict(self.data["paths"])
