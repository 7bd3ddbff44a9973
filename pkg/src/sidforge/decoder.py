"""Trie-constrained beam search over attribute+SID token paths.

The trie contains exactly the decoded paths of the corpus, so beam
expansion can never emit a token combination that resolves to no item.
Ranking is by cumulative log-probability with lexicographic path
tie-breaks for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class DecoderError(ValueError):
    pass


@dataclass
class _TrieNode:
    children: dict = field(default_factory=dict)
    items: set = field(default_factory=set)  # non-empty only at leaves


class PathTrie:
    """Layered prefix tree mapping full token paths to item-id sets."""

    def __init__(self, n_steps: int):
        self.n_steps = n_steps
        self.root = _TrieNode()
        self.n_paths = 0
        self.total_items = 0

    def insert(self, path, item_id: int):
        path = tuple(path)
        if len(path) != self.n_steps:
            raise DecoderError(
                f"path length {len(path)} inconsistent with trie depth {self.n_steps}"
            )
        node = self.root
        for tok in path:
            node = node.children.setdefault(int(tok), _TrieNode())
        if not node.items:
            self.n_paths += 1
        node.items.add(item_id)
        self.total_items += 1

    def children(self, prefix) -> list:
        """Sorted valid continuations of a prefix (empty if prefix absent)."""
        node = self._node(prefix)
        return sorted(node.children) if node is not None else []

    def items_at(self, path) -> set:
        node = self._node(path)
        if node is None or not node.items:
            raise DecoderError(f"path {tuple(path)} not in trie")
        return set(node.items)

    def paths(self):
        """All full paths, lexicographic order."""
        out = []

        def walk(node, prefix):
            if len(prefix) == self.n_steps:
                out.append(prefix)
                return
            for tok in sorted(node.children):
                walk(node.children[tok], prefix + (tok,))

        walk(self.root, ())
        return out

    def _node(self, prefix):
        node = self.root
        for tok in prefix:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node


def build_trie(sequences_by_item: dict) -> PathTrie:
    """Trie over item paths; SID collisions accumulate in leaf item sets."""
    if not sequences_by_item:
        raise DecoderError("no sequences to index")
    lengths = {len(p) for p in sequences_by_item.values()}
    if len(lengths) != 1:
        raise DecoderError(f"inconsistent sequence lengths {sorted(lengths)}")
    trie = PathTrie(n_steps=lengths.pop())
    for item_id in sorted(sequences_by_item):
        trie.insert(sequences_by_item[item_id], item_id)
    return trie


@dataclass(frozen=True)
class Candidate:
    path: tuple
    logprob: float
    item_ids: tuple


def beam_search(model, trie: PathTrie, beam_width: int, top_k: int) -> list:
    """Width-limited exact search over trie-valid paths.

    ``model.step_logprobs(prefix)`` must return log-probabilities over the
    vocabulary of step len(prefix)+1.  Returns min(top_k, #paths)
    candidates ranked by cumulative log-probability, ties broken by
    lexicographic token path.
    """
    if top_k < 1 or beam_width < top_k:
        raise DecoderError("need beam_width >= top_k >= 1")
    if not trie.root.children:
        raise DecoderError("empty trie")

    beams = [((), 0.0)]
    for _ in range(trie.n_steps):
        expansions = []
        for path, lp in beams:
            step_lp = model.step_logprobs(path)
            for tok in trie.children(path):
                if tok >= len(step_lp):
                    raise DecoderError(
                        f"trie token {tok} outside scorer vocabulary at step {len(path) + 1}"
                    )
                expansions.append((path + (tok,), lp + float(step_lp[tok])))
        expansions.sort(key=lambda e: (-e[1], e[0]))
        beams = expansions[:beam_width]

    return [
        Candidate(path=path, logprob=lp, item_ids=tuple(sorted(trie.items_at(path))))
        for path, lp in beams[:top_k]
    ]
