"""Rule-penalty guidance during ancestral sampling.

Sampling from a trained student produces samples whose patch norms drift
off the rule.  Adding the gradient of the norm-rule penalty (evaluated at
the posterior-mean denoised state) to the score pulls samples back toward
the rule manifold.
"""

from rulelab import theory

dist = theory.MultiPatchDistribution(d=50)

nets = {}
for t in theory.DEFAULT_TS:
    sched = theory.NoiseSchedulePoint.from_t(t)
    res = theory.train_gd(dist, sched, activation="relu", m=20, n=200,
                          n_eps=100, epochs=500, lr=0.05, seed=0)
    nets[t] = res.net
fn = theory.make_net_score_fn(nets)

print("trained relu student, 500 samples per setting:\n")
base = None
for lam in (0.0, 0.5, 1.0, 2.0):
    out = theory.ancestral_sample(fn, dist.d, 500, lam=lam, seed=9)
    s = out["stats"]
    note = ""
    if lam == 0.0:
        base = s["mean_gap"]
    else:
        note = f"  ({100 * (1 - s['mean_gap'] / base):.0f}% reduction)"
    print(f"lambda = {lam:3.1f}: mean rule gap {s['mean_gap']:.3f} "
          f"(median {s['median_gap']:.3f}){note}")

out = theory.ancestral_sample(theory.make_true_score_fn(dist), dist.d, 500,
                              lam=0.0, seed=9)
print(f"\nexact score, no guidance: mean gap "
      f"{out['stats']['mean_gap']:.2e} — the rule lives in the score itself.")
