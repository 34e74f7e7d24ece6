"""
This subpackage contains the analytic cost model and the
self-check suites run by the verify command.

Modules:
--------

available_routines: lists the self-check suites available.

cost_model: parameter, cache and FLOP accounting of attention
            mechanisms.

invariants: the self-check suites.
"""
