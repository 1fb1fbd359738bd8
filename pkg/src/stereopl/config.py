"""Run configuration: INI schema, validation, and defaults.

One seed in the [run] section drives all randomness; the world generator and
every per-frame stream derive from it. Unknown sections or keys are rejected
so that a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError
from .feature_grid import DEFAULT_TOLERANCE
from .geometry import StereoCamera
from .keyframe import DEFAULT_RATIO, DEFAULT_V_GATE, PidState, VelocityKalman
from .line_merge import RHO_REL, THETA_TOL
from .optimizer import HUBER_LINE_DELTA, HUBER_POINT_DELTA, LmSettings
from .simworld import KITTI_CAMERA, VGA_CAMERA, WorldConfig

CAMERA_PRESETS = {"vga": VGA_CAMERA, "kitti": KITTI_CAMERA}

# section -> key -> (type tag, default); camera keys default to the preset
_SCHEMA = {
    "run": {
        "seed": ("int", 0),
        "output_dir": ("str", "out"),
    },
    "camera": {
        "preset": ("str", "vga"),
        "fx": ("float", None),
        "fy": ("float", None),
        "cx": ("float", None),
        "cy": ("float", None),
        "bf": ("float", None),
        "width": ("int", None),
        "height": ("int", None),
    },
    "world": {
        "n_points": ("int", 200),
        "n_lines": ("int", 50),
        "extent": ("float", 8.0),
        "trajectory": ("str", "circle"),
        "speed": ("float", 1.0),
        "duration": ("float", 10.0),
        "frame_rate": ("float", 10.0),
        "pixel_noise_sigma": ("float", 0.0),
        "dropout_prob": ("float", 0.0),
        "max_line_splits": ("int", 3),
    },
    "grid": {
        "n_target": ("int", 150),
        "tolerance": ("float", DEFAULT_TOLERANCE),
    },
    "merge": {
        "rho_rel": ("float", RHO_REL),
        "theta_tol": ("float", THETA_TOL),
    },
    "huber": {
        "point_delta": ("float", HUBER_POINT_DELTA),
        "line_delta": ("float", HUBER_LINE_DELTA),
    },
    "lm": {
        "lam0": ("float", 1e-4),
        "lam_up": ("float", 10.0),
        "lam_down": ("float", 0.5),
        "max_iterations": ("int", 100),
        "cost_tolerance": ("float", 1e-12),
        "step_tolerance": ("float", 1e-10),
        "lam_max": ("float", 1e10),
    },
    "pid": {
        "kp": ("float", 0.3),
        "ki": ("float", 0.05),
        "kd": ("float", 0.1),
        "integral_clamp": ("float", 50.0),
    },
    "policy": {
        "ratio": ("float", DEFAULT_RATIO),
        "v_gate": ("float", DEFAULT_V_GATE),
        "use_velocity_gate": ("bool", True),
        "kalman_p0": ("float", 1.0),
        "kalman_q": ("float", 1e-3),
        "kalman_r": ("float", 1e-2),
    },
    "tracking": {
        "use_lines": ("bool", True),
        "window": ("int", 5),
        "min_disparity": ("float", 0.5),
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    camera: StereoCamera = VGA_CAMERA
    world: WorldConfig = field(default_factory=WorldConfig)
    grid_n_target: int = 150
    grid_tolerance: float = DEFAULT_TOLERANCE
    merge_rho_rel: float = RHO_REL
    merge_theta_tol: float = THETA_TOL
    huber_point: float = HUBER_POINT_DELTA
    huber_line: float = HUBER_LINE_DELTA
    lm: LmSettings = field(default_factory=LmSettings)
    pid: PidState = field(default_factory=PidState)
    kalman: VelocityKalman = field(default_factory=VelocityKalman)
    ratio: float = DEFAULT_RATIO
    v_gate: float = DEFAULT_V_GATE
    use_velocity_gate: bool = True
    use_lines: bool = True
    window: int = 5
    min_disparity: float = 0.5

    def __post_init__(self):
        if self.grid_n_target < 2:
            raise ConfigError("grid n_target must be at least 2")
        if self.grid_tolerance <= 0:
            raise ConfigError("grid tolerance must be positive")
        if self.merge_rho_rel <= 0 or self.merge_theta_tol <= 0:
            raise ConfigError("merge tolerances must be positive")
        if self.huber_point <= 0 or self.huber_line <= 0:
            raise ConfigError("huber deltas must be positive")
        if self.window < 2:
            raise ConfigError("tracking window must be at least 2")
        if self.min_disparity <= 0:
            raise ConfigError("min_disparity must be positive")
        if not self.output_dir:
            raise ConfigError("output_dir must not be empty")


def default_config() -> RunConfig:
    return RunConfig()


def _read_values(parser: configparser.ConfigParser, path) -> dict:
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            kind, _ = _SCHEMA[section][key]
            try:
                if kind == "bool":
                    values[(section, key)] = _parse_bool(raw)
                else:
                    values[(section, key)] = _PARSERS[kind](raw)
            except ValueError:
                raise ConfigError(
                    f"{path}: [{section}] {key} = {raw!r} is not a valid {kind}")
    return values


def _build(values: dict, seed_override: int | None) -> RunConfig:
    def get(section, key):
        if (section, key) in values:
            return values[(section, key)]
        return _SCHEMA[section][key][1]

    seed = get("run", "seed") if seed_override is None else int(seed_override)

    preset = get("camera", "preset")
    if preset not in CAMERA_PRESETS:
        raise ConfigError(f"camera preset must be one of {sorted(CAMERA_PRESETS)}")
    base = CAMERA_PRESETS[preset]
    cam_kwargs = {}
    for key in ("fx", "fy", "cx", "cy", "bf", "width", "height"):
        cam_kwargs[key] = values.get(("camera", key), getattr(base, key))
    try:
        camera = StereoCamera(**cam_kwargs)
        world = WorldConfig(
            seed=seed,
            n_points=get("world", "n_points"),
            n_lines=get("world", "n_lines"),
            extent=get("world", "extent"),
            trajectory=get("world", "trajectory"),
            speed=get("world", "speed"),
            duration=get("world", "duration"),
            frame_rate=get("world", "frame_rate"),
            pixel_noise_sigma=get("world", "pixel_noise_sigma"),
            dropout_prob=get("world", "dropout_prob"),
            max_line_splits=get("world", "max_line_splits"),
            camera=camera,
        )
        lm = LmSettings(
            lam0=get("lm", "lam0"),
            lam_up=get("lm", "lam_up"),
            lam_down=get("lm", "lam_down"),
            max_iterations=get("lm", "max_iterations"),
            cost_tolerance=get("lm", "cost_tolerance"),
            step_tolerance=get("lm", "step_tolerance"),
            lam_max=get("lm", "lam_max"),
        )
        pid = PidState(
            kp=get("pid", "kp"),
            ki=get("pid", "ki"),
            kd=get("pid", "kd"),
            integral_clamp=get("pid", "integral_clamp"),
        )
        kalman = VelocityKalman(
            v=0.0,
            p=get("policy", "kalman_p0"),
            q=get("policy", "kalman_q"),
            r_meas=get("policy", "kalman_r"),
        )
        ratio = get("policy", "ratio")
        if not 0.0 < ratio <= 1.0:
            raise ValueError("policy ratio must be in (0, 1]")
        v_gate = get("policy", "v_gate")
        if v_gate <= 0:
            raise ValueError("policy v_gate must be positive")
        return RunConfig(
            seed=seed,
            output_dir=get("run", "output_dir"),
            camera=camera,
            world=world,
            grid_n_target=get("grid", "n_target"),
            grid_tolerance=get("grid", "tolerance"),
            merge_rho_rel=get("merge", "rho_rel"),
            merge_theta_tol=get("merge", "theta_tol"),
            huber_point=get("huber", "point_delta"),
            huber_line=get("huber", "line_delta"),
            lm=lm,
            pid=pid,
            kalman=kalman,
            ratio=ratio,
            v_gate=v_gate,
            use_velocity_gate=get("policy", "use_velocity_gate"),
            use_lines=get("tracking", "use_lines"),
            window=get("tracking", "window"),
            min_disparity=get("tracking", "min_disparity"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate an INI run configuration."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return _build(_read_values(parser, path), seed_override)


def config_from_defaults(seed_override: int | None = None) -> RunConfig:
    return _build({}, seed_override)
