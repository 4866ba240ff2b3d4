"""Run configuration: one INI file drives ingestion, planning and validation.

Every tunable has an explicit key and a default; the file only needs the
keys that differ. Booleans accept true/false/yes/no/1/0, lists are
comma-separated, and an empty value means "unset" for optional keys.
"""
import configparser
from dataclasses import dataclass

from .benders import GBDOptions
from .conic import SolverOptions
from .ingest import BoundaryConditionSpec
from .opf import DispatchWeights


class ConfigError(ValueError):
    pass


_LOSS_MODES = ("quadratic", "linear")
_VALIDATION_MODES = ("none", "relax-integrality-socp", "dc-lp")
_SITE_RULES = ("explicit", "voltage-violating")


@dataclass
class RunConfig:
    # [paths]
    case: str = ""
    series: str = ""
    series_q: str = ""           # reactive series; else reconstructed/zero
    gen_series: str = ""
    out: str = "runs"
    # [weights]
    w_loss: float = 1.0
    w_slack: float = 1.0e3
    oc: float = 1.0              # loss cost, applied to every branch
    capex_scale: float = 1.0
    alpha_floor: float = 0.0
    relax_dispatch_slack: bool = False
    relax_voltage_limits: bool = False
    # [tolerances]
    epsilon: float = 5e-3
    delta: float = None          # absolute gap; required by validation modes
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    # [run]
    loss_mode: str = "quadratic"
    validation_mode: str = "none"
    day_hours: int = 24
    workers: int = 1
    seed: int = 0
    max_iterations: int = 500
    # [boundary]
    tighten_factor: float = 0.82
    tighten_branches: tuple = ()
    relax_slack_p: bool = False
    candidate_site_rule: str = "explicit"
    site_buses: tuple = ()
    site_w_max: float = None
    site_c_max: float = None
    site_c_rate: float = None
    site_ic_p: float = None
    site_ic_e: float = None

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be positive, got %r"
                              % self.epsilon)
        if self.delta is not None and self.delta <= 0.0:
            raise ConfigError("delta must be positive, got %r" % self.delta)
        if self.w_slack <= 0.0:
            raise ConfigError("w_slack must be positive, got %r"
                              % self.w_slack)
        if self.workers < 1:
            raise ConfigError("worker count must be at least 1, got %r"
                              % self.workers)
        if self.day_hours < 1:
            raise ConfigError("day_hours must be at least 1, got %r"
                              % self.day_hours)
        if self.max_iterations < 1:
            raise ConfigError("iteration cap must be at least 1, got %r"
                              % self.max_iterations)
        if self.loss_mode not in _LOSS_MODES:
            raise ConfigError("loss_mode must be one of %s, got %r"
                              % ("/".join(_LOSS_MODES), self.loss_mode))
        if self.validation_mode not in _VALIDATION_MODES:
            raise ConfigError("validation_mode must be one of %s, got %r"
                              % ("/".join(_VALIDATION_MODES),
                                 self.validation_mode))
        if self.validation_mode != "none" and self.delta is None:
            raise ConfigError("validation modes terminate on the absolute "
                              "gap; set delta")
        if self.candidate_site_rule not in _SITE_RULES:
            raise ConfigError("candidate_site_rule must be one of %s, got %r"
                              % ("/".join(_SITE_RULES),
                                 self.candidate_site_rule))

    # -- views consumed by the engine modules --

    def weights(self):
        return DispatchWeights(
            w_loss=self.w_loss, w_slack=self.w_slack, oc=self.oc,
            loss_mode=self.loss_mode, capex_scale=self.capex_scale,
            relax_slack_p=self.relax_dispatch_slack,
            relax_v_limits=self.relax_voltage_limits)

    def solver_options(self):
        return SolverOptions(feas_tol=self.feas_tol, gap_tol=self.gap_tol)

    def gbd_options(self, trace_path=None):
        return GBDOptions(
            epsilon=self.epsilon, delta=self.delta,
            max_iterations=self.max_iterations, workers=self.workers,
            alpha_floor=self.alpha_floor,
            relax_integrality=self.validation_mode == "relax-integrality-socp",
            subproblem="dc" if self.validation_mode == "dc-lp" else "socp",
            refine=self.validation_mode == "none",
            trace_path=trace_path, solver_options=self.solver_options())

    def boundary_spec(self):
        """The requested network edits; None when the config asks for none."""
        untouched = (not self.tighten_branches and not self.relax_slack_p
                     and self.candidate_site_rule == "explicit"
                     and not self.site_buses)
        if untouched:
            return None
        params = {"w_max": self.site_w_max, "c_max": self.site_c_max,
                  "c_rate": self.site_c_rate, "ic_p": self.site_ic_p,
                  "ic_e": self.site_ic_e}
        params = {k: v for k, v in params.items() if v is not None}
        return BoundaryConditionSpec(
            tighten_factor=self.tighten_factor,
            branches_to_tighten=self.tighten_branches,
            relax_slack_p=self.relax_slack_p,
            candidate_site_rule=self.candidate_site_rule,
            site_buses=self.site_buses, site_params=params or None)


# (section, key) -> (RunConfig field, parser). Anything else in the file is
# a typo and is rejected rather than silently ignored.


def _string(raw):
    return raw.strip()


def _float(raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError("expected a number, got %r" % raw)


def _optional_float(raw):
    return None if not raw.strip() else _float(raw)


def _int(raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("expected an integer, got %r" % raw)


_BOOLEANS = {"true": True, "yes": True, "1": True,
             "false": False, "no": False, "0": False}


def _bool(raw):
    try:
        return _BOOLEANS[raw.strip().lower()]
    except KeyError:
        raise ConfigError("expected true/false, got %r" % raw)


def _id_list(raw):
    return tuple(t.strip() for t in raw.split(",") if t.strip())


_SCHEMA = {
    ("paths", "case"): ("case", _string),
    ("paths", "series"): ("series", _string),
    ("paths", "series_q"): ("series_q", _string),
    ("paths", "gen_series"): ("gen_series", _string),
    ("paths", "out"): ("out", _string),
    ("weights", "w_loss"): ("w_loss", _float),
    ("weights", "w_slack"): ("w_slack", _float),
    ("weights", "oc"): ("oc", _float),
    ("weights", "capex_scale"): ("capex_scale", _float),
    ("weights", "alpha_floor"): ("alpha_floor", _float),
    ("weights", "relax_dispatch_slack"): ("relax_dispatch_slack", _bool),
    ("weights", "relax_voltage_limits"): ("relax_voltage_limits", _bool),
    ("tolerances", "epsilon"): ("epsilon", _float),
    ("tolerances", "delta"): ("delta", _optional_float),
    ("tolerances", "feas_tol"): ("feas_tol", _float),
    ("tolerances", "gap_tol"): ("gap_tol", _float),
    ("run", "loss_mode"): ("loss_mode", _string),
    ("run", "validation_mode"): ("validation_mode", _string),
    ("run", "day_hours"): ("day_hours", _int),
    ("run", "workers"): ("workers", _int),
    ("run", "seed"): ("seed", _int),
    ("run", "max_iterations"): ("max_iterations", _int),
    ("boundary", "tighten_factor"): ("tighten_factor", _float),
    ("boundary", "tighten_branches"): ("tighten_branches", _id_list),
    ("boundary", "relax_slack_p"): ("relax_slack_p", _bool),
    ("boundary", "candidate_site_rule"): ("candidate_site_rule", _string),
    ("boundary", "site_buses"): ("site_buses", _id_list),
    ("boundary", "site_w_max"): ("site_w_max", _optional_float),
    ("boundary", "site_c_max"): ("site_c_max", _optional_float),
    ("boundary", "site_c_rate"): ("site_c_rate", _optional_float),
    ("boundary", "site_ic_p"): ("site_ic_p", _optional_float),
    ("boundary", "site_ic_e"): ("site_ic_e", _optional_float),
}

_SECTIONS = sorted({s for s, _ in _SCHEMA})


def load_config(path, overrides=None):
    """Parse an INI run file into a RunConfig; unknown keys are errors.

    overrides, a {field: value} mapping, wins over the file — the CLI feeds
    command-line flags through it.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                   interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh, source=path)
    except OSError as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc))
    except configparser.Error as exc:
        raise ConfigError("%s: %s" % (path, exc))

    fields = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError("%s: unknown section [%s]" % (path, section))
        for key, raw in cp.items(section):
            try:
                field, parse = _SCHEMA[(section, key)]
            except KeyError:
                raise ConfigError("%s: unknown key %r in [%s]"
                                  % (path, key, section))
            try:
                fields[field] = parse(raw)
            except ConfigError as exc:
                raise ConfigError("%s: [%s] %s: %s"
                                  % (path, section, key, exc))
    if overrides:
        fields.update(overrides)
    try:
        return RunConfig(**fields)
    except ConfigError as exc:
        raise ConfigError("%s: %s" % (path, exc))


def config_template():
    """A commented file with every key at its default; doubles as the docs."""
    cfg = RunConfig()
    lines = []
    by_section = {}
    for (section, key), (field, _) in _SCHEMA.items():
        by_section.setdefault(section, []).append((key, field))
    for section in _SECTIONS:
        lines.append("[%s]" % section)
        for key, field in by_section[section]:
            value = getattr(cfg, field)
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, bool):
                value = str(value).lower()
            elif value is None:
                value = ""
            lines.append("%s = %s" % (key, value))
        lines.append("")
    return "\n".join(lines)
