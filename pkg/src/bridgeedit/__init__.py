"""Coarse-mask local image editing with a dual-path token layout and per-token rotary routing.

Subpackages are plain modules; import what you need, e.g.::

    from bridgeedit import backbone, flow, sampler, synth
"""

__version__ = "0.1.0"
