"""Independent reference values frozen into the C++ unit tests.

Run with: python3 tests/oracles/derive_values.py
"""
import datetime
import json
import math

import numpy as np

out = {}

# logistic derivative at 0
s = 1 / (1 + math.exp(-0.0))
out["sigmoid_grad_0"] = s * (1 - s)

# central difference of w^2 at 1 with eps 1e-5
eps = 1e-5
out["central_diff_square"] = ((1 + eps) ** 2 - (1 - eps) ** 2) / (2 * eps)

# trend projection
out["trend_dot"] = float(np.dot([0.5, 0.5], [2.0, 4.0]) + 1.0)
# one-hot last lag with bias d: T_hat(h) = T_t + h d
x = np.array([3.0, 5.0, 7.0])
d = 0.25
w = np.array([0.0, 0.0, 1.0])
roll = list(x)
tt = float(np.dot(w, roll[-3:]) + d)
roll.append(tt)
hats = []
for _ in range(4):
    v = float(np.dot(w, roll[-3:]) + d)
    hats.append(v)
    roll.append(v)
out["trend_recursion"] = {"T_t": tt, "hats": hats}

out["seasonal_tau4_t1"] = math.sin(2 * math.pi * 1 / 4)

# patch count at L=180, patch 16, stride 8, patches aligned to the window end
L = 180
n = (L - 16) // 8 + 1
out["patch_count_180"] = n

# API
g = 0.9
p = [10.0, 0.0, 5.0]
out["api"] = sum(g ** i * p[i] for i in range(3))

# softmax [ln 2, 0, 0, 0, 0]
z = np.array([math.log(2), 0, 0, 0, 0])
e = np.exp(z - z.max())
out["softmax_ln2"] = list(e / e.sum())

out["fuse_half"] = 0.5 * 2 + 0.5 * 4
out["entropy_two_point"] = -2 * 0.5 * math.log(0.5)
out["entropy_uniform5"] = math.log(5)

# empirical CDF: fraction of sorted training values <= v
train = np.array([0.0, 0.0, 1.5, 3.0, 12.0])
out["ecdf"] = {str(v): float(np.mean(train <= v)) for v in [-1.0, 0.0, 2.0, 12.0]}

# mixed base, extreme
out["mse_mae_single"] = 1 * 2 ** 2 + 1 * 2
out["extreme_example"] = (1 * 1 + 2 * 1) / 2


def nse(xt, xf):
    xt, xf = np.asarray(xt, float), np.asarray(xf, float)
    return 1 - np.sum((xt - xf) ** 2) / np.sum((xt - xt.mean()) ** 2)


def kge(xt, xf):
    xt, xf = np.asarray(xt, float), np.asarray(xf, float)
    r = np.corrcoef(xt, xf)[0, 1]
    a = xf.std() / xt.std()
    b = xf.mean() / xt.mean()
    return 1 - math.sqrt((r - 1) ** 2 + (a - 1) ** 2 + (b - 1) ** 2)


out["nse_example"] = nse([1, 2, 3], [1, 1, 3])
out["kge_example"] = kge([1, 2, 3], [2, 4, 6])
out["kge_shift"] = kge([1, 2, 3], [3, 4, 5])

out["weekly_1_14"] = list(np.arange(1, 15, dtype=float).reshape(2, 7).mean(axis=1))
out["info_nce_equal"] = -math.log(1 / 2)
out["consistency_example"] = float(np.mean(np.array([1.0, 3.0]) ** 2))
out["population_variance_1_5"] = float(np.var([1, 2, 3, 4, 5]))
out["l2_example"] = 0.5 * (1 + 4)

# binomial mean of the mask size
out["mask_mean"] = 0.15 * 180

# calendar lengths of ten-year spans
out["ten_year_days"] = {
    str(y): (datetime.date(y + 10, 1, 1) - datetime.date(y, 1, 1)).days for y in (2000, 2001, 2003)
}
# stride-1 anchors
out["anchor_count"] = 10 - 4 - 2 + 1
out["weekly_len_180"] = 180 // 7
out["monthly_len_180"] = 180 // 30

# AdamW first step, g=1, theta=0.5, lr=4e-4, eps=1e-8, no decay
lr, b1, b2, eps_o = 4e-4, 0.9, 0.999, 1e-8
m = (1 - b1) * 1.0
v = (1 - b2) * 1.0
mh, vh = m / (1 - b1), v / (1 - b2)
out["adamw_first_step"] = 0.5 - lr * mh / (math.sqrt(vh) + eps_o)
# decoupled decay with zero gradient
out["adamw_decay_only"] = 0.5 * (1 - lr * 0.1)

# F1 for obs [1,0,0,1], pred [1,0,0,0]
tp, fp, fn = 1, 0, 1
out["f1_example"] = 2 * tp / (2 * tp + fp + fn)

# two-window toy scoring
obs = np.array([[1.0, 2.0, 3.0], [2.0, 2.0, 4.0]])
pred = np.array([[1.5, 2.0, 2.0], [2.0, 3.0, 4.0]])
err = pred - obs
out["toy_scores"] = {
    "mse": float(np.mean(err ** 2)),
    "mae": float(np.mean(np.abs(err))),
    "nse": float(np.mean([nse(obs[i], pred[i]) for i in range(2)])),
    "kge": float(np.mean([kge(obs[i], pred[i]) for i in range(2)])),
}

# linear re-interpolation of a crop [2, 2+3) of 0..5 back to 6 points
series = np.arange(6, dtype=float)
crop = series[2:5]
pos = np.linspace(0, len(crop) - 1, 6)
out["crop_interp"] = list(np.interp(pos, np.arange(len(crop)), crop))

# quantile (linear interpolation, numpy default)
out["quantile_09"] = float(np.quantile([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0], 0.9))
out["percentile_40"] = float(np.percentile([0.5, 0.1, 0.4, 0.2, 0.3], 40))

print(json.dumps(out, indent=2))
