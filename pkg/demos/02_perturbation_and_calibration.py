"""Inject a known rule violation and watch the error metric recover it.

Perturbed generation multiplies each scene's target ratio by (1 + bias)
plus Gaussian noise.  The regression's bias term should recover the
injected offset and its residual spread should track the injected noise.
"""

import numpy as np

from rulelab import analysis, scenegen, vision

task = "B"
for bias, noise_sd in ((0.0, 0.0), (0.05, 0.0), (0.05, 0.02), (0.0, 0.05)):
    manifest, images = scenegen.generate_perturbed(
        task, 500, 32, seed=3, bias=bias, noise_sd=noise_sd)
    records = [vision.extract_features(img, task) for img in images]
    report = analysis.fit_rule_regression(records, task)
    ratios = np.array([p.ratio for p in manifest.samples])
    print(f"bias={bias:.2f} noise={noise_sd:.2f}: "
          f"mean realized ratio {ratios.mean():.4f}, "
          f"slope {report.beta1_hat:.4f} +- {report.beta1_se:.4f}, "
          f"bias term {report.bias_error:.4f}, "
          f"residual sd {report.variance_error:.4f}")

print("\nWith bias only, the slope moves; with noise only, the residual "
      "spread grows — the two error components separate cleanly.")
