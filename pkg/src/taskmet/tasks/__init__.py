from .base import DecisionTask, Instances, decision_quality, topk_decision, topk_exact, topk_relaxed
from .budget import BudgetTask, budget_objective, solve_budget_exact
from .cubic import CubicTask, cubic_targets, generate_cubic
from .portfolio import PortfolioTask, portfolio_solve, portfolio_value, solve_portfolio_qp

TASKS = {"cubic": CubicTask, "budget": BudgetTask, "portfolio": PortfolioTask}


def make_task(name: str, **kwargs) -> DecisionTask:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name](**kwargs)


__all__ = [
    "BudgetTask",
    "CubicTask",
    "DecisionTask",
    "Instances",
    "PortfolioTask",
    "TASKS",
    "budget_objective",
    "cubic_targets",
    "decision_quality",
    "generate_cubic",
    "make_task",
    "portfolio_solve",
    "portfolio_value",
    "solve_budget_exact",
    "solve_portfolio_qp",
    "topk_decision",
    "topk_exact",
    "topk_relaxed",
]
