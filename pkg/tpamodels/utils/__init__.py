"""
This subpackage contains helper routines shared by the
models, the postprocessing tools and the main scripts.

Modules:
--------

cmd_parser_tools: command-line and JSON configuration parsing.

errors: the exception hierarchy of the package.

filesaver: the binary tensor format, CSV and JSON output.

linalg: deterministic dense kernels, masked softmax with
        log-sum-exp.

logger: handler setup for the entry points.

set_numba_lib: thread count of the numba kernels.
"""
