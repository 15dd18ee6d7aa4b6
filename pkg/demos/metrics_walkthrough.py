# Vulnerability and detection metrics on hand-made score lists.
import numpy as np

from morphkit.evaluation import (apcer_bpcer, bpcer_at_apcer, confidence_half_width, det_curve, mmpmr,
                                 threshold_at_far)

rng = np.random.default_rng(0)

# ---------- threshold from impostor comparisons ----------
impostor = rng.normal(0.2, 0.1, 2000)
for far in (0.01, 0.001):
    print(f"FAR {far:<6} -> tau = {threshold_at_far(impostor, far):.4f}")
tau = threshold_at_far(impostor, 0.001)

# ---------- MMPMR: a morph succeeds only if it matches every contributing subject ----------
mated = {f"m{i}": {"a": rng.normal(0.55, 0.1), "b": rng.normal(0.5, 0.1)} for i in range(200)}
print(f"MMPMR at tau={tau:.3f}: {mmpmr(mated, tau):.3f}")
for t in (0.3, 0.4, 0.5, 0.6):
    print(f"  tau={t}: {mmpmr(mated, t):.3f}")

# ---------- detector side: higher score = more attack-like ----------
attack = rng.normal(0.7, 0.15, 300)
bonafide = rng.normal(0.35, 0.15, 300)
print("APCER/BPCER at 0.5:", apcer_bpcer(attack, bonafide, 0.5))
for target in (0.05, 0.1):
    op = bpcer_at_apcer(attack, bonafide, target)
    print(f"BPCER @ APCER={target}: {op.bpcer:.3f} (threshold {op.threshold:.3f}, APCER {op.apcer:.3f})")

curve = det_curve(attack, bonafide)
print(f"DET curve: {len(curve.thresholds)} operating points")

# ---------- confidence half-width for a per-morph metric ----------
psnr_values = rng.normal(16.5, 0.8, 50)
print(f"PSNR {psnr_values.mean():.3f} +- {confidence_half_width(psnr_values):.3f}")
