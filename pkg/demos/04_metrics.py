"""Correlation metrics, the logistic mapping and the PSNR/SSIM baselines.

SRCC only looks at ranks.  PLCC is reported after fitting a monotone
four-parameter logistic from predictions to opinion scores, which removes
any smooth nonlinearity before the linear correlation is taken.

Run:  python3 demos/04_metrics.py
"""
import numpy as np

from pyramid_iqa import evaluation as ev

rng = np.random.default_rng(0)

# %% A saturating relation: ranks agree perfectly, raw PLCC does not
s = np.sort(rng.uniform(0, 10, 40))
mos = ev.logistic(s, (9, 1, 5, 1.2)) + rng.normal(0, 0.2, s.size)
beta, mapped = ev.logistic_fit(s, mos)
print(f"SRCC {ev.srcc(s, mos):.3f}")
print(f"PLCC raw {ev.plcc(s, mos):.3f}  after logistic {ev.plcc(mapped, mos):.3f}")
print("fitted beta", np.round(beta, 3))

# %% Ties share the average rank
print("SRCC with ties:", ev.srcc([1, 2, 2, 3], [1, 3, 2, 4]))

# %% Classic full-reference scores react to noise as expected
ref = np.clip(rng.random((96, 96)) * 0.6 + 0.2, 0, 1)
for sigma in (0.01, 0.05, 0.1):
    dist = np.clip(ref + rng.normal(0, sigma, ref.shape), 0, 1)
    print(f"noise {sigma:.2f}: PSNR {ev.psnr(dist, ref):6.2f} dB  SSIM {ev.ssim(dist, ref):.4f}")
