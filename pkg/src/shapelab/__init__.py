"""Event-driven simulation of the two-type infection model on Z^d.

A-particles and B-particles perform independent continuous-time random walks
with a common jump rate; an A-particle turns B on meeting a B-particle. The
package measures the growing visited set, estimates directional speeds and
the limit shape, and checks the model's structural laws on seeded replicas.
"""
__version__ = "0.1.0"
