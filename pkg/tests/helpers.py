from dataclasses import replace

import numpy as np

from scenegat.graph import validate_graph


def permute_graph(g, perm):
    """Relabel node i as perm[i]; validation then sorts nodes by the new ids.

    Edge order is kept, so original edge k maps to edge k, and the
    self-loop of old node i lands at position E + perm[i].
    """
    nodes = tuple(replace(n, node_id=int(perm[n.node_id])) for n in g.nodes)
    edges = tuple(replace(e, subject_id=int(perm[e.subject_id]), object_id=int(perm[e.object_id])) for e in g.edges)
    return validate_graph(replace(g, nodes=nodes, edges=edges))


def edge_permutation(g, perm):
    """Index map from the original message-edge order to the permuted one."""
    e = g.num_edges
    return np.concatenate([np.arange(e), e + np.asarray(perm)])


# acceptance verdict lines, echoed again in the terminal summary
VERDICTS = {}
