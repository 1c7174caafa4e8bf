"""Elastic MPM simulation, orthographic rendering and dataset generation."""

from .mpm import (
    ElementInversionError,
    OutOfDomainError,
    ParticleState,
    SceneSpec,
    SimulationError,
    Trajectory,
    init_scene,
    kirchhoff_stress,
    lame_params,
    mpm_step,
    simulate,
    total_energy,
)
from .render import background, composite, exact_flow, render_view
from .dataset import (
    DatasetError,
    SceneRecord,
    build_record,
    dataset_hash,
    load_dataset,
    load_record,
    make_dataset,
    read_manifest,
    render_trajectory,
    temporal_densify,
)
