"""
Training on a synthetic city
============================

Sixteen sensors with daily cycles. Two groups share a phase, the rest are
independent. We train for a few epochs and compare against repeating the
last observed value.
"""

import numpy as np

from fast_stg.data import chronological_split, synth_generate
from fast_stg.model import ModelConfig
from fast_stg.training import TrainConfig, evaluate, persistence_forecast, train

ds = synth_generate(N=16, days=14, granularity=15, seed=0)
print("series", ds.values.shape, "steps per day", ds.steps_per_day)

model_cfg = ModelConfig(N=16, T=24, P=12, d=16, e=4, a=8, L=2, steps_per_day=96)
result = train(model_cfg, TrainConfig(max_epochs=10, seed=0), ds)
for epoch, loss, val_mae, lr, secs in result.history:
    print(f"epoch {epoch:2d}  loss {loss:8.3f}  val MAE {val_mae:6.3f}  lr {lr:g}")

report = evaluate(result.model, result.normalizer, ds, "test", result.train_cfg)
test_range = chronological_split(ds.T_total)[2]
Y_hat, Y = persistence_forecast(ds, test_range, model_cfg.T, model_cfg.P)
print(f"test MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  MAPE {report.mape:.2f}%  R2 {report.r2:.3f}")
print(f"persistence MAE {np.mean(np.abs(Y - Y_hat)):.3f}")
print("MAE by horizon step:", " ".join(f"{row[1]:.2f}" for row in report.per_step))
