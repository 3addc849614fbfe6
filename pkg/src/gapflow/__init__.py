"""Graph-planned agent runtime: plan a dependency graph, run each level as one parallel tool batch."""

from .executor import Executor, RunConfig, RunResult, Termination, execute_batch, run
from .graph import (
    CycleError,
    DanglingDependency,
    DependencyGraph,
    ExecutionPlan,
    TaskNode,
    UnboundPlaceholder,
    resolve_query,
    topological_levels,
    validate_dag,
)
from .policies import Generation, HttpPolicy, Policy, ScriptedPolicy
from .trace import (
    EventKind,
    Rollout,
    RolloutRecord,
    TraceEvent,
    parse_graph_dsl,
    parse_plan,
    parse_stream,
    render_observation,
    serialize_events,
    serialize_graph_dsl,
    split_queries,
)

__version__ = "0.1.0"

__all__ = [
    "CycleError",
    "DanglingDependency",
    "DependencyGraph",
    "EventKind",
    "ExecutionPlan",
    "Executor",
    "Generation",
    "HttpPolicy",
    "Policy",
    "Rollout",
    "RolloutRecord",
    "RunConfig",
    "RunResult",
    "ScriptedPolicy",
    "TaskNode",
    "Termination",
    "TraceEvent",
    "UnboundPlaceholder",
    "execute_batch",
    "parse_graph_dsl",
    "parse_plan",
    "parse_stream",
    "render_observation",
    "resolve_query",
    "run",
    "serialize_events",
    "serialize_graph_dsl",
    "split_queries",
    "topological_levels",
    "validate_dag",
]
