# %% [markdown]
# # Serving under a latency constraint
#
# One FIFO server, clients joining linearly over the ramp. The elastic
# schedule picks, at every dequeue, the best level whose estimated completion
# (g + 1) * t_p fits the constraint. Static schedules pin one level.

# %%
from elasticlm import pipeline as P
from elasticlm import simulator as S
from elasticlm.scheduler import ElasticScheduler, LatencyProfile, StaticScheduler

profile = LatencyProfile.from_table(P.SYNTHETIC_LATENCY_MS, P.SYNTHETIC_PROXY)
spec = S.WorkloadSpec()  # 100 clients over 50 s, 120 s total, 1-3 s pauses
arrivals = S.generate_workload(spec)
print(len(arrivals), "requests")

# %% Three schedules at T = 250 ms
T = 250.0
runs = {
    "elastic": S.run_discrete_event(arrivals, ElasticScheduler(profile, T), profile),
    "static50": S.run_discrete_event(arrivals, StaticScheduler(profile, 50, T), profile),
    "static5": S.run_discrete_event(arrivals, StaticScheduler(profile, 5, T), profile),
}
windows = {"first10s": (0.0, 10.0), "peak": (spec.ramp_s, spec.duration_s)}
print(S.table_to_csv(S.compare(runs, spec, T, windows)))

# %% Latency and chosen level over time for the elastic run
rep = S.report(runs["elastic"], spec, T, bucket_s=10, label="elastic")
for row in rep.rows:
    print(f"{row['bucket_start_s']:>5.0f}s  clients {int(row['concurrency']):>3}  "
          f"p95 {row['p95_latency_ms']:>7.1f} ms  level {row['level_mode']}")
