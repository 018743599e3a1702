import math
import struct
import zlib
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Optional


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class MapConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    resolution: float = Field(
        default=0.1, gt=0, description="Leaf voxel edge length in meters."
    )
    depth_levels: int = Field(
        default=16,
        ge=2,
        le=21,
        description="Tree height. The world spans resolution * 2**depth_levels per axis, centered on the origin.",
    )
    p_hit: float = Field(
        default=0.7, gt=0.5, lt=1.0, description="Occupancy probability of a hit."
    )
    p_miss: float = Field(
        default=0.4, gt=0.0, lt=0.5, description="Occupancy probability of a miss."
    )
    l_min: float = Field(
        default=logit(0.12), lt=0.0, description="Lower log-odds clamp bound."
    )
    l_max: float = Field(
        default=logit(0.97), gt=0.0, description="Upper log-odds clamp bound."
    )
    occ_threshold: float = Field(
        default=0.5,
        ge=0.5,
        lt=1.0,
        description="A voxel is Occupied when its probability is strictly above this.",
    )
    free_threshold: float = Field(
        default=0.5,
        gt=0.0,
        le=0.5,
        description="A voxel is Free when its probability is strictly below this.",
    )

    @model_validator(mode="after")
    def _check_thresholds(self) -> "MapConfig":
        if self.free_threshold > self.occ_threshold:
            raise ValueError("free_threshold must not exceed occ_threshold")
        return self

    @property
    def half_extent(self) -> float:
        return self.resolution * 2 ** (self.depth_levels - 1)

    @property
    def hit_logodds(self) -> float:
        return logit(self.p_hit)

    @property
    def miss_logodds(self) -> float:
        return logit(self.p_miss)

    @property
    def occ_logodds(self) -> float:
        return logit(self.occ_threshold)

    @property
    def free_logodds(self) -> float:
        return logit(self.free_threshold)

    def voxel_size(self, depth: int) -> float:
        return self.resolution * 2**depth

    def pack(self) -> bytes:
        return struct.pack(
            "<dB6d",
            self.resolution,
            self.depth_levels,
            self.p_hit,
            self.p_miss,
            self.l_min,
            self.l_max,
            self.occ_threshold,
            self.free_threshold,
        )

    def fingerprint(self) -> int:
        return zlib.crc32(self.pack())


class IntegratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_range: float = Field(
        default=100.0,
        gt=0,
        description="Rays are truncated beyond this range; truncated endpoints only mark free space.",
    )
    free_depth: int = Field(
        default=0,
        ge=0,
        description="Level at which free space along rays is discretized (0 = leaf).",
    )
    early_stop: bool = Field(
        default=False,
        description="Stop a ray at the first voxel that was Occupied before the frame.",
    )

    def check(self, map_config: MapConfig) -> "IntegratorConfig":
        if self.free_depth >= map_config.depth_levels:
            raise ValueError(
                f"free_depth {self.free_depth} must be below depth_levels {map_config.depth_levels}"
            )
        return self


class VoxmapConfig(BaseModel):
    map: MapConfig = Field(default_factory=MapConfig, description="Map configuration.")
    integrator: IntegratorConfig = Field(
        default_factory=IntegratorConfig, description="Integrator configuration."
    )
    slots: Optional[List[int]] = Field(
        default=None,
        description="Label slots integrated per point. Defaults to slot 0 when the log has labels.",
    )
    threads: int = Field(
        default=1, ge=1, description="Reserved. Integration is single threaded."
    )
