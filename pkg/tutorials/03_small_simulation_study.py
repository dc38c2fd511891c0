"""
A small Monte Carlo study
=========================

Run a handful of replications of a bundled scenario and print the summary
table. The ``cencov simulate`` command does the same from the shell.
"""

from cencov.simulation import (
    bundled_scenario,
    format_table,
    list_bundled_scenarios,
    run_replications,
    summarize_to_table,
)

print("bundled scenarios:", list_bundled_scenarios())

# Twenty replications keep this quick; the acceptance suite uses 300.
scenario = bundled_scenario("bartlett").with_updates(replications=20)
summary = run_replications(scenario, threads=1)

print(f"censoring rate: {summary.censoring_rate:.3f}")
# SE and SD columns are multiplied by 100.
print(format_table(summarize_to_table(summary, coefficients=[0])))
