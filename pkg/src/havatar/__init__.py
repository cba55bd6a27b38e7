"""Hybrid mesh-volume head avatar toolkit.

Trains a rigged base mesh plus a deformable opacity/feature field defined
over a prism lattice from posed images, then distills the result into a
rigged triangle asset with neural textures that renders in a plain
rasterization pipeline. Includes a synthetic scene generator so the whole
pipeline is verifiable at desk scale.
"""

__version__ = "0.1.0"
