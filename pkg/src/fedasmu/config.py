"""Experiment configuration: one INI file fully determines a run.

Sections group keys per subsystem; every key has a typed default, unknown
keys are rejected, and dump/load round-trips exactly. The file format is
plain configparser INI.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace

from .device import DeviceConfig
from .errors import ConfigError
from .server import ServerConfig
from .simulate import RunConfig
from .strategies import STRATEGY_KINDS, StrategyKnobs
from .tasks import ModelSpec

_INT, _FLOAT, _BOOL, _STR, _INTS, _STRS = "int", "float", "bool", "str", "ints", "strs"

# section -> key -> (field name, type tag); defaults live on the dataclass
SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "task": {
        "kind": ("task_kind", _STR),
        "n": ("n_samples", _INT),
        "input_dim": ("input_dim", _INT),
        "classes": ("n_classes", _INT),
        "class_sep": ("class_sep", _FLOAT),
        "hidden": ("hidden", _INT),
        "dirichlet_alpha": ("dirichlet_alpha", _FLOAT),
        "test_fraction": ("test_fraction", _FLOAT),
    },
    "run": {
        "devices": ("m", _INT),
        "devices_per_trigger": ("m_prime", _INT),
        "rounds": ("rounds", _INT),
        "staleness_limit": ("tau", _INT),
        "trigger_period": ("trigger_period", _FLOAT),
        "parallelism_cap": ("parallelism_cap", _FLOAT),
        "local_epochs": ("local_epochs", _INT),
        "batch_size": ("batch_size", _INT),
        "eval_interval": ("eval_interval", _INT),
        "time_budget": ("time_budget", _FLOAT),
        "block_on_fresh": ("block_on_fresh", _BOOL),
    },
    "rates": {
        "eta_local": ("eta_local", _FLOAT),
        "eta_lambda": ("eta_lambda", _FLOAT),
        "eta_sigma": ("eta_sigma", _FLOAT),
        "eta_iota": ("eta_iota", _FLOAT),
        "eta_gamma": ("eta_gamma", _FLOAT),
        "eta_upsilon": ("eta_upsilon", _FLOAT),
        "eta_rl": ("eta_rl", _FLOAT),
    },
    "server": {
        "mu_alpha": ("mu_alpha", _FLOAT),
        "lambda0": ("lambda0", _FLOAT),
        "sigma0": ("sigma0", _FLOAT),
        "iota0": ("iota0", _FLOAT),
        "alpha_min": ("alpha_min", _FLOAT),
        "alpha_max": ("alpha_max", _FLOAT),
        "lambda_min": ("lambda_min", _FLOAT),
        "lambda_max": ("lambda_max", _FLOAT),
        "sigma_min": ("sigma_min", _FLOAT),
        "sigma_max": ("sigma_max", _FLOAT),
        "iota_min": ("iota_min", _FLOAT),
        "iota_max": ("iota_max", _FLOAT),
        "paper_literal_sigma_grad": ("paper_literal_sigma_grad", _BOOL),
    },
    "device": {
        "mu_beta": ("mu_beta", _FLOAT),
        "gamma0": ("gamma0", _FLOAT),
        "upsilon0": ("upsilon0", _FLOAT),
        "rho": ("rho", _FLOAT),
        "beta_max": ("beta_max", _FLOAT),
        "gamma_min": ("gamma_min", _FLOAT),
        "gamma_max": ("gamma_max", _FLOAT),
        "upsilon_max": ("upsilon_max", _FLOAT),
    },
    "selector": {
        "hidden": ("selector_hidden", _INT),
        "phi_q": ("phi_q", _FLOAT),
        "psi_q": ("psi_q", _FLOAT),
        "eps_warmup_rounds": ("eps_warmup_rounds", _INT),
        "eps_warm": ("eps_warm", _FLOAT),
        "eps_start": ("eps_start", _FLOAT),
        "eps_end": ("eps_end", _FLOAT),
    },
    "latency": {
        "base_epoch_time": ("base_epoch_time", _FLOAT),
        "heterogeneity_ratio": ("heterogeneity_ratio", _FLOAT),
        "uplink": ("uplink", _FLOAT),
        "downlink": ("downlink", _FLOAT),
    },
    "strategy": {
        "fedasync_exponent": ("fedasync_exponent", _FLOAT),
        "fedasync_alpha0": ("fedasync_alpha0", _FLOAT),
        "fedbuff_buffer": ("fedbuff_buffer", _INT),
        "fedavg_fraction": ("fedavg_fraction", _FLOAT),
    },
    "experiment": {
        "strategies": ("strategies", _STRS),
        "seeds": ("seeds", _INTS),
        "out_dir": ("out_dir", _STR),
        "target_accuracy": ("target_accuracy", _FLOAT),
    },
}


def _parse_value(raw: str, tag: str, where: str):
    try:
        if tag == _INT:
            return int(raw)
        if tag == _FLOAT:
            return float(raw)
        if tag == _BOOL:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tag == _STR:
            return raw.strip()
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if tag == _INTS:
            return tuple(int(p) for p in parts)
        return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tag}") from exc


def _format_value(value, tag: str) -> str:
    if tag == _BOOL:
        return "true" if value else "false"
    if tag == _FLOAT:
        return repr(float(value))
    if tag in (_INTS, _STRS):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat typed view of every config key (field names per SCHEMA)."""

    # task
    task_kind: str = "linear-softmax"
    n_samples: int = 5000
    input_dim: int = 20
    n_classes: int = 10
    class_sep: float = 1.5
    hidden: int = 16
    dirichlet_alpha: float = 0.5
    test_fraction: float = 0.2
    # run
    m: int = 100
    m_prime: int = 10
    rounds: int = 500
    tau: int = 99
    trigger_period: float = 10.0
    parallelism_cap: float = 0.1
    local_epochs: int = 5
    batch_size: int = 32
    eval_interval: int = 5
    time_budget: float = 0.0
    block_on_fresh: bool = False
    # rates
    eta_local: float = 0.05
    eta_lambda: float = 1e-4
    eta_sigma: float = 1e-4
    eta_iota: float = 1e-4
    eta_gamma: float = 1e-4
    eta_upsilon: float = 1e-4
    eta_rl: float = 1e-3
    # server
    mu_alpha: float = 1.0
    lambda0: float = 1.0
    sigma0: float = 1.0
    iota0: float = 0.0
    alpha_min: float = 0.01
    alpha_max: float = 0.99
    lambda_min: float = 1e-3
    lambda_max: float = 1e3
    sigma_min: float = 1e-2
    sigma_max: float = 10.0
    iota_min: float = 0.0
    iota_max: float = 10.0
    paper_literal_sigma_grad: bool = False
    # device
    mu_beta: float = 1.0
    gamma0: float = 1.0
    upsilon0: float = 0.5
    rho: float = 0.9
    beta_max: float = 0.9
    gamma_min: float = 1e-3
    gamma_max: float = 1e3
    upsilon_max: float = 5.0
    # selector
    selector_hidden: int = 16
    phi_q: float = 0.5
    psi_q: float = 0.9
    eps_warmup_rounds: int = 5
    eps_warm: float = 0.5
    eps_start: float = 0.3
    eps_end: float = 0.01
    # latency
    base_epoch_time: float = 1.0
    heterogeneity_ratio: float = 5.0
    uplink: float = 0.1
    downlink: float = 0.1
    # strategy knobs
    fedasync_exponent: float = 0.5
    fedasync_alpha0: float = 0.6
    fedbuff_buffer: int = 10
    fedavg_fraction: float = 0.0
    # experiment
    strategies: tuple = ("FedASMU",)
    seeds: tuple = (1, 2, 3, 4, 5)
    out_dir: str = "runs"
    target_accuracy: float = 0.6

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if not 0.0 < self.target_accuracy < 1.0:
            raise ConfigError("target_accuracy must be in (0, 1)")
        if not self.strategies:
            raise ConfigError("need at least one strategy")
        for kind in self.strategies:
            if kind not in STRATEGY_KINDS:
                raise ConfigError(f"unknown strategy {kind!r}")
        if self.n_samples < self.m:
            raise ConfigError("need at least one sample per device")
        try:
            self.model_spec()
            self.run_config(self.strategies[0]).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_spec(self) -> ModelSpec:
        return ModelSpec(kind=self.task_kind, input_dim=self.input_dim,
                         n_classes=self.n_classes, hidden=self.hidden)

    def run_config(self, strategy: str) -> RunConfig:
        server = ServerConfig(
            mu_alpha=self.mu_alpha, eta_lambda=self.eta_lambda,
            eta_sigma=self.eta_sigma, eta_iota=self.eta_iota,
            alpha_min=self.alpha_min, alpha_max=self.alpha_max,
            lambda_bounds=(self.lambda_min, self.lambda_max),
            sigma_bounds=(self.sigma_min, self.sigma_max),
            iota_bounds=(self.iota_min, self.iota_max),
            paper_literal_sigma_grad=self.paper_literal_sigma_grad)
        device = DeviceConfig(
            mu_beta=self.mu_beta, eta_gamma=self.eta_gamma,
            eta_upsilon=self.eta_upsilon, beta_max=self.beta_max,
            gamma_bounds=(self.gamma_min, self.gamma_max),
            upsilon_bounds=(0.0, self.upsilon_max))
        knobs = StrategyKnobs(fedasync_exponent=self.fedasync_exponent,
                              fedasync_alpha0=self.fedasync_alpha0,
                              fedbuff_buffer=self.fedbuff_buffer)
        return RunConfig(
            strategy=strategy, m=self.m, m_prime=self.m_prime,
            rounds=self.rounds, tau=self.tau,
            trigger_period=self.trigger_period,
            parallelism_cap=self.parallelism_cap,
            local_epochs=self.local_epochs, batch_size=self.batch_size,
            eta_local=self.eta_local, eval_interval=self.eval_interval,
            time_budget=self.time_budget,
            base_epoch_time=self.base_epoch_time,
            heterogeneity_ratio=self.heterogeneity_ratio,
            uplink=self.uplink, downlink=self.downlink,
            block_on_fresh=self.block_on_fresh,
            fedavg_fraction=self.fedavg_fraction,
            lambda0=self.lambda0, sigma0=self.sigma0, iota0=self.iota0,
            server=server, device=device,
            gamma0=self.gamma0, upsilon0=self.upsilon0, rho=self.rho,
            selector_hidden=self.selector_hidden, eta_rl=self.eta_rl,
            phi_q=self.phi_q, psi_q=self.psi_q,
            eps_warmup_rounds=self.eps_warmup_rounds, eps_warm=self.eps_warm,
            eps_start=self.eps_start, eps_end=self.eps_end, knobs=knobs)


def load_config(path) -> ExperimentConfig:
    """Parse and validate an INI config; unknown sections/keys are errors."""
    parser = configparser.ConfigParser()
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not read:
        raise ConfigError(f"{path}: no such file")
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            field_name, tag = SCHEMA[section][key]
            values[field_name] = _parse_value(raw, tag, f"{path} [{section}] {key}")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; load(dump(cfg)) == cfg."""
    out = io.StringIO()
    for section, keys in SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (field_name, tag) in keys.items():
            out.write(f"{key} = {_format_value(getattr(cfg, field_name), tag)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the semantically meaningful fields (the canonical dump)."""
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    valid = {f.name for f in fields(ExperimentConfig)}
    unknown = set(changes) - valid
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    new = replace(cfg, **changes)
    new.validate()
    return new
