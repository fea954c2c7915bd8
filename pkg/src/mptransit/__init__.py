"""Mesoscopic traffic simulator and max-pressure signal controllers with
transit priority under partial connected-vehicle observation."""

from .network import (
    ConfigurationError,
    Link,
    Movement,
    Network,
    Phase,
    SegmentationStrategy,
    SignalNode,
    segment_vehicle_window,
)
from .scenario import (
    ControllerConfig,
    DemandEntry,
    Scenario,
    ScenarioError,
    TransitLine,
    load_scenario,
    validate_network,
)
from .simulation import (
    World,
    effective_saturation,
    necessary_condition_monitor,
    sample_cv,
    transit_update,
)
from .controllers import (
    MaxPressureController,
    MovementObservation,
    NodeObservation,
    PressureTable,
    beta,
    beta_eta,
    cvmp_pressure,
    eocc_pressure,
    mtransit_pressure,
    occ_pressure,
    select_phases,
    tau,
    transit_pressure,
)
from .estimation import (
    ErrorModel,
    HistoricalStats,
    estimate_penetration,
    inject_error,
    iqa_step,
    tau_hat,
)
from .analysis import (
    LyapunovSample,
    MetricsFrame,
    RegionCertificate,
    admissible_region_check,
    detect_starvation,
    lyapunov_value,
    metrics_frame,
    stability_verdict,
)
from .harness import (
    RunDescriptor,
    RunResult,
    SweepDescriptor,
    calibrate,
    run,
    simulate_run,
    sweep,
)

__version__ = "0.1.0"
