"""Brute-force reference implementations used only by the test suite.

These deliberately share no code with the production modules they validate:
plain dicts, full sorts, exhaustive loops.  They are slow by design and must
stay that way; the point is an independent second route to the same answer.
"""

from __future__ import annotations

import math


def _collect_ngrams(tokens, order):
    grams = []
    for start in range(len(tokens) - order + 1):
        grams.append(tuple(tokens[start : start + order]))
    return grams


def oracle_cider(candidate, references, corpus, max_order: int = 4) -> float:
    """Naive CIDEr: tf-idf n-gram cosine against each reference, n = 1..4.

    ``candidate`` is a token list, ``references`` a list of token lists, and
    ``corpus`` the full list of reference sets (each a list of token lists)
    that defines document frequencies.  Returns 10 * mean over orders of the
    reference-averaged cosine.
    """
    num_docs = len(corpus)
    per_order = []
    for order in range(1, max_order + 1):
        # document frequency: how many corpus images mention the gram at all
        doc_freq = {}
        for image_refs in corpus:
            seen = set()
            for ref in image_refs:
                for gram in _collect_ngrams(ref, order):
                    seen.add(gram)
            for gram in seen:
                doc_freq[gram] = doc_freq.get(gram, 0) + 1

        def tfidf(tokens):
            vec = {}
            for gram in _collect_ngrams(tokens, order):
                vec[gram] = vec.get(gram, 0.0) + 1.0
            for gram in vec:
                df = doc_freq.get(gram, 1)
                vec[gram] = vec[gram] * math.log(num_docs / df)
            return vec

        cand_vec = tfidf(candidate)
        cand_norm = math.sqrt(sum(w * w for w in cand_vec.values()))
        total = 0.0
        for ref in references:
            ref_vec = tfidf(ref)
            ref_norm = math.sqrt(sum(w * w for w in ref_vec.values()))
            if cand_norm == 0.0 or ref_norm == 0.0:
                continue
            dot = 0.0
            for gram, w in cand_vec.items():
                if gram in ref_vec:
                    dot += w * ref_vec[gram]
            total += dot / (cand_norm * ref_norm)
        per_order.append(total / len(references))
    return 10.0 * sum(per_order) / len(per_order)


def oracle_topk(matrix, k, exclusions):
    """Full-sort top-k per row, skipping excluded columns.

    ``exclusions[i]`` is the set of column indices never returned for row i.
    Ties break toward the lower column index.
    """
    result = []
    for i, row in enumerate(matrix):
        banned = exclusions[i] if i < len(exclusions) else set()
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        kept = [j for j in order if j not in banned]
        result.append(kept[:k])
    return result


def oracle_recall(score_matrix, ground_truth, ks):
    """Exhaustive recall@K: fraction of queries whose truth appears in top K.

    ``ground_truth[i]`` is the set of matching column indices for query row i.
    Returns {k: percentage}.
    """
    n_queries = len(score_matrix)
    hits = {k: 0 for k in ks}
    for i, row in enumerate(score_matrix):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        matches = ground_truth[i]
        best_rank = None
        for rank, j in enumerate(order):
            if j in matches:
                best_rank = rank
                break
        for k in ks:
            if best_rank is not None and best_rank < k:
                hits[k] += 1
    return {k: 100.0 * hits[k] / n_queries for k in ks}
