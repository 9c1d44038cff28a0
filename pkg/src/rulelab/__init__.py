"""Rule-governed image laboratory.

Synthesizes small images whose elements obey exact geometric rules,
evaluates rule conformity of arbitrary image directories, analyzes the
results statistically, studies a tractable two-patch diffusion model whose
score and training dynamics are known in closed form, and exercises
guidance- and filter-based mitigation.
"""

from . import analysis, colors, mitigation, scenegen, theory, vision

__all__ = ["analysis", "colors", "mitigation", "scenegen", "theory",
           "vision"]
__version__ = "0.1.0"
