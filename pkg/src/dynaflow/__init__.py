"""dynaflow: desk-scale dynamic traffic modeling from overhead imagery.

Rasterizes road networks into training targets, trains a multi-task
segmentation network (roads, travel orientation, time-conditioned speeds)
with region-aggregated speed supervision, and applies the predictions to
time-dependent routing and isochrone generation.
"""

__version__ = "0.1.0"
