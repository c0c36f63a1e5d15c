"""Explainable battery-dispatch policies.

Differentiable decision trees trained with an off-policy actor-critic loop
on a simulated home energy management system, plus the crisp extraction,
rendering, rule-based baseline and optimal-dispatch references needed to
judge them.
"""

from .agents import (
    AgentConfig,
    EvalReport,
    ReplayBuffer,
    Transition,
    evaluate,
    make_rbc_policy,
    rbc_action,
    select_action,
    train,
)
from .critic import (
    AdamState,
    MlpParams,
    adam_init,
    adam_step,
    init_mlp,
    load_mlp,
    mlp_backward,
    mlp_forward,
    polyak_update,
    save_mlp,
)
from .ddt import (
    CrispTree,
    TreeGradients,
    TreeParams,
    analyze_reachability,
    backward,
    crispify,
    decision_prob,
    export_tree,
    forward_depth2,
    forward_soft,
    infer_crisp,
    init_tree,
    leaf_distribution,
    load_tree,
    save_tree,
)
from .hems import BatteryConfig, HemsEnv, StepResult, TariffConfig, battery_step
from .oracle import PlanResult, dp_optimal, exhaustive_optimal
from .profiles import (
    NormStats,
    ProfileDay,
    ProfileSet,
    SynthConfig,
    load_csv,
    norm_apply,
    norm_fit,
    norm_invert,
    save_csv,
    synthesize,
)

__version__ = "0.1.0"
