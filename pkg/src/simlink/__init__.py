"""Remote-SIM tunnel lab.

A desk-scale stack that decouples a (virtual) SIM card from the modem
driving it: an APDU/ATR codec, a deterministic virtual SIM, a framed
tunnel protocol, a lease broker, a trace/rewrite layer, and a simulated
latency lab. See README.md for the CLI entry points.
"""

__version__ = "0.1.0"
