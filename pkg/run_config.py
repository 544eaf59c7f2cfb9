"""
Run configuration for the command-line front end.

A RunConfig is assembled from an optional JSON problem-config file and the
command-line flags (flags win), validated before anything is computed, and
then resolved into the problem, its reference, gains, weights and grid.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

from evolve import FORMS, PRIMARY
from ocp_model import Gains, Weights
from problems import BUILTIN_CONFIGS, builtin, family_problem
from solver_errors import ConfigError, GridTooSmall
from time_grid import GridSpec

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "vem_output"

DEFAULTS = {
    "form": "compact",
    "nodes": 41,
    "tau_end": 100.0,
    "rtol": 1e-5,
    "atol": 1e-8,
    "trace_every": 1.0,
    "tol": 1e-4,
    "substeps": 1,
    "seed": 0,
    "moving_horizon": False,
}

CALLBACK_NAMES = (
    "f", "fx", "fu", "L", "Lx", "Lu", "phi", "phix", "phit", "phixx", "phixt", "phitt",
    "g", "gx", "gt", "gxt", "gtt", "Hxx", "Hux", "Huu", "gxx_pi", "Ht",
)


def default_out_dir():
    return os.environ.get("VEM_OUT_DIR", DEFAULT_OUT_DIR)


@dataclass(frozen=True)
class RunConfig:
    """Validated settings of one CLI run."""

    problem: Optional[str] = None
    config_path: Optional[str] = None
    family: Optional[str] = None
    parameters: dict = field(default_factory=dict)
    form: str = DEFAULTS["form"]
    nodes: int = DEFAULTS["nodes"]
    gains: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    tau_end: float = DEFAULTS["tau_end"]
    rtol: float = DEFAULTS["rtol"]
    atol: float = DEFAULTS["atol"]
    trace_every: float = DEFAULTS["trace_every"]
    tol: float = DEFAULTS["tol"]
    substeps: int = DEFAULTS["substeps"]
    out_dir: str = DEFAULT_OUT_DIR
    seed: int = DEFAULTS["seed"]
    moving_horizon: bool = DEFAULTS["moving_horizon"]
    callback_scale: dict = field(default_factory=dict)

    def validate(self):
        """Raise ConfigError or GridTooSmall when any setting is unusable."""
        if not self.family:
            raise ConfigError("a problem is required: pass --problem or --config")
        if self.form not in FORMS:
            raise ConfigError(f"form must be one of {', '.join(FORMS)}, got '{self.form}'")
        if not isinstance(self.nodes, int) or self.nodes < 3:
            raise GridTooSmall(f"--nodes must be an integer of at least 3, got {self.nodes}")
        for name in ("tau_end", "rtol", "atol", "trace_every", "tol"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"{name} must be a positive number, got {value}")
        if not isinstance(self.substeps, int) or self.substeps < 1:
            raise ConfigError(f"substeps must be a positive integer, got {self.substeps}")
        if not isinstance(self.moving_horizon, bool):
            raise ConfigError(f"moving_horizon must be true or false, got {self.moving_horizon}")
        unknown = set(self.callback_scale) - set(CALLBACK_NAMES)
        if unknown:
            raise ConfigError(f"callback_scale names unknown callbacks: {', '.join(sorted(unknown))}")
        return self


def load_problem_config(path):
    """Read a JSON problem-config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config '{path}' is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(data, dict) or "family" not in data:
        raise ConfigError(f"config '{path}' must be an object with a 'family' entry")
    return data


def build_run_config(problem=None, config_path=None, **flags):
    """
    Merge a built-in or file problem config with command-line flags.

    Args:
        problem (str, optional): Built-in problem name.
        config_path (str, optional): JSON problem-config path.
        **flags: Flag values; None means the flag was not given. Gain and
            weight flags are named K, k_tf, K_pi, W_xf, w_H, W_x0, W_lambda.

    Returns:
        RunConfig: The validated configuration.
    """
    if problem and config_path:
        raise ConfigError("pass either --problem or --config, not both")
    if problem:
        if problem not in BUILTIN_CONFIGS:
            raise ConfigError(f"unknown problem '{problem}', expected one of {', '.join(sorted(BUILTIN_CONFIGS))}")
        base = json.loads(json.dumps(BUILTIN_CONFIGS[problem]))
    elif config_path:
        base = load_problem_config(config_path)
    else:
        base = {}

    gains = dict(base.get("gains", {}))
    weights = dict(base.get("weights", {}))
    for key in ("K", "k_tf", "K_pi"):
        if flags.get(key) is not None:
            gains[key] = flags.pop(key)
        flags.pop(key, None)
    for key in ("W_xf", "w_H", "W_x0", "W_lambda"):
        if flags.get(key) is not None:
            weights[key] = flags.pop(key)
        flags.pop(key, None)

    values = {name: base[name] for name in DEFAULTS if name in base}
    values.update({name: value for name, value in flags.items() if value is not None})
    if values.get("out_dir") is None:
        values["out_dir"] = default_out_dir()

    config = RunConfig(
        problem=problem,
        config_path=config_path,
        family=base.get("family"),
        parameters=dict(base.get("parameters", {})),
        gains=gains,
        weights=weights,
        callback_scale=dict(base.get("callback_scale", {})),
        **values,
    )
    return config.validate()


def _scaled(callback, factor):
    def scaled(*args):
        return factor * callback(*args)
    return scaled


def resolve(config):
    """
    Turn a validated RunConfig into solver inputs.

    Returns:
        tuple: (OcpProblem, ReferenceSolution or None, Gains, Weights, GridSpec).
    """
    if config.problem:
        prob, reference = builtin(config.problem)
    else:
        prob, reference = family_problem(config.family, config.parameters)
    if config.callback_scale:
        overrides = {name: _scaled(getattr(prob, name), float(factor))
                     for name, factor in config.callback_scale.items()}
        logger.warning(f"Scaling callbacks {', '.join(sorted(overrides))} of '{prob.name}'")
        prob = prob.with_callbacks(**overrides)

    size = prob.m if config.form != PRIMARY else 2 * prob.n + prob.m
    gains = Gains.build(size, prob.q, K=config.gains.get("K", 1.0), k_tf=config.gains.get("k_tf", 1.0),
                        K_pi=config.gains.get("K_pi", 1.0))
    weights = Weights.for_problem(prob, **{k: v for k, v in config.weights.items()
                                           if k in ("W_xf", "w_H", "W_x0", "W_lambda")})
    spec = GridSpec(N=int(config.nodes), t0=prob.t0, tf=prob.tf, substeps=int(config.substeps))
    return prob, reference, gains, weights, spec
