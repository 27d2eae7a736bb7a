"""Federated mammogram-metadata query engine.

A grid of per-site metadata stores answers clinician queries by moving
sub-queries to the data: the originating node translates user phrasing to
a formal predicate, fans it out one hop to every peer, executes locally,
and joins the XML result sets, consulting a version-guarded knowledge base
before doing any of that work twice.
"""

__version__ = "0.1.0"
