from prometheus_client import Counter, Gauge, Histogram

# Stage counters
stage_runs_total = Counter("mrsi_stage_runs_total", "Pipeline stage runs", ["stage", "status"])  # status=ok|error
stage_latency_seconds = Histogram(
    "mrsi_stage_latency_seconds",
    "Wall-clock seconds per pipeline stage",
    ["stage"],
    buckets=(0.01, 0.05, 0.1, 0.5, 1, 2, 5, 10, 30, 60, 120, 300, 600),
)

# Solvers
solver_iterations_total = Counter(
    "mrsi_solver_iterations_total", "Outer iterations completed by iterative solvers", ["solver"]
)  # solver=tgv_er|water
solver_divergence_total = Counter("mrsi_solver_divergence_total", "Solver runs aborted on divergence", ["solver"])

# Trajectory / data
trajectory_samples_total = Counter("mrsi_trajectory_samples_total", "k-space samples generated", ["kind"])  # kind=full|kept

# Network training and inference
training_steps_total = Counter("mrsi_training_steps_total", "Optimizer steps taken")
training_loss_last = Gauge("mrsi_training_loss_last", "Mean loss of the most recent training epoch")
inference_seconds = Histogram("mrsi_inference_seconds", "Network inference wall-clock seconds per timepoint")


def observe_stage(stage: str, seconds: float, ok: bool = True):
    """Record one stage run."""
    try:
        stage_runs_total.labels(stage=stage, status="ok" if ok else "error").inc()
        stage_latency_seconds.labels(stage=stage).observe(seconds)
    except Exception:
        # metrics must never fail a pipeline stage
        pass
