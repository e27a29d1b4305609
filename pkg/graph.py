from langgraph.graph import START, END, StateGraph

from models import SweepState
from nodes import assemble_sweep_table, calibrate_cell, fan_out_cells, prepare_sweep


def build_sweep_graph():
    """Build the prior-sensitivity sweep: fan out over (formulation, sigma), then tabulate"""
    builder = StateGraph(SweepState)
    builder.add_node("prepare_sweep", prepare_sweep)
    builder.add_node("calibrate_cell", calibrate_cell)
    builder.add_node("assemble_table", assemble_sweep_table)

    builder.add_edge(START, "prepare_sweep")
    builder.add_conditional_edges("prepare_sweep", fan_out_cells, ["calibrate_cell"])
    builder.add_edge("calibrate_cell", "assemble_table")
    builder.add_edge("assemble_table", END)

    return builder.compile()


def run_sweep(
    data,
    formulations,
    prior_sigmas,
    hmc,
    seed: int,
    parameterization: str = "noncentered",
    kl_direction: str = "observed_to_predicted",
):
    """Run the sweep graph and return its final state (reports and table)"""
    graph = build_sweep_graph()
    return graph.invoke({
        "data": data,
        "formulations": list(formulations),
        "prior_sigmas": [float(s) for s in prior_sigmas],
        "hmc": hmc,
        "parameterization": parameterization,
        "seed": seed,
        "kl_direction": kl_direction,
        "reports": [],
        "table": [],
    })
