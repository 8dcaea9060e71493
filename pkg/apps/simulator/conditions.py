from dataclasses import dataclass, replace

from apps.common.exceptions import ConfigurationError


@dataclass(frozen=True)
class Condition:
    """Observation quality: per-cell noise grows with distance from ego by range_decay per meter."""

    name: str
    noise_sigma: float
    occlusion_rate: float = 0.0
    range_decay: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigurationError(f"occlusion rate must be in [0, 1], got {self.occlusion_rate}")
        if self.range_decay < 0:
            raise ConfigurationError(f"range decay must be >= 0, got {self.range_decay}")

    def with_changes(self, **changes) -> "Condition":
        return replace(self, **changes)


CONDITIONS = {
    "normal": Condition("normal", noise_sigma=0.3, occlusion_rate=0.0, range_decay=0.005),
    "rain": Condition("rain", noise_sigma=0.6, occlusion_rate=0.05, range_decay=0.01),
    "night": Condition("night", noise_sigma=0.7, occlusion_rate=0.1, range_decay=0.015),
    "night_rain": Condition("night_rain", noise_sigma=0.9, occlusion_rate=0.15, range_decay=0.02),
}

NOISELESS = Condition("noiseless", noise_sigma=0.0)


def get_condition(name: str) -> Condition:
    if name == NOISELESS.name:
        return NOISELESS
    try:
        return CONDITIONS[name]
    except KeyError:
        raise ConfigurationError(f"unknown condition '{name}', expected one of {sorted(CONDITIONS)}")
