import logging
from dataclasses import dataclass, field, replace

import numpy as np

from src.errors import ConfigurationError, ProtocolError

logger = logging.getLogger('driftguard')

LINKAGES = ('average',)


@dataclass(frozen=True)
class ClusterSettings:
    distance_threshold: float = 0.3
    min_group_size: int = 2
    linkage: str = 'average'

    def __post_init__(self):
        if isinstance(self.distance_threshold, bool) \
                or not isinstance(self.distance_threshold, (int, float)) \
                or self.distance_threshold < 0:
            raise ConfigurationError(
                f"clustering.distance_threshold must be >= 0, got {self.distance_threshold!r}")
        if isinstance(self.min_group_size, bool) or not isinstance(self.min_group_size, int) \
                or self.min_group_size < 1:
            raise ConfigurationError(
                f"clustering.min_group_size must be an integer >= 1, got {self.min_group_size!r}")
        if self.linkage not in LINKAGES:
            raise ConfigurationError(
                f"clustering.linkage must be one of {', '.join(LINKAGES)}, got {self.linkage!r}")


@dataclass
class Grouping:
    groups: list
    centroids: list
    matrices: dict = field(default_factory=dict, repr=False)
    bank_assignment: dict = field(default_factory=dict)

    def group_of(self, device_id):
        for index, group in enumerate(self.groups):
            if device_id in group:
                return index
        raise ProtocolError(f"Device {device_id} is not in any group")

    def bank_of(self, device_id):
        return self.bank_assignment[self.group_of(device_id)]

    def to_dict(self):
        return {
            'groups': [list(group) for group in self.groups],
            'banks': [self.bank_assignment.get(i) for i in range(len(self.groups))],
        }


def matrix_distance(a, b):
    """Frobenius distance divided by sqrt(#entries)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ProtocolError(f"Cannot compare gating matrices of shapes {a.shape} and {b.shape}")
    return float(np.linalg.norm(a - b) / np.sqrt(a.size))


def make_grouping(groups, matrices):
    groups = sorted(tuple(sorted(group)) for group in groups)
    centroids = [np.mean([matrices[d] for d in group], axis=0) for group in groups]
    return Grouping(groups, centroids, matrices)


class _Linkage:
    def __init__(self, matrices):
        self.ids = sorted(matrices)
        self.position = {d: i for i, d in enumerate(self.ids)}
        n = len(self.ids)
        self.distances = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d = matrix_distance(matrices[self.ids[i]], matrices[self.ids[j]])
                self.distances[i, j] = self.distances[j, i] = d

    def average(self, a, b):
        rows = [self.position[d] for d in a]
        cols = [self.position[d] for d in b]
        return float(self.distances[np.ix_(rows, cols)].mean())


def agglomerate(observations, settings):
    """
    Average-linkage agglomerative clustering cut at the distance threshold.

    Clusters merge pairwise while the closest pair is within the threshold.
    Ties go to the pair with the smallest (min device id, other min device id).
    """
    if not observations:
        raise ProtocolError("Clustering needs at least one observation")
    matrices = {o.device_id: o.gating_matrix for o in observations}
    linkage = _Linkage(matrices)
    clusters = [[d] for d in linkage.ids]
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                distance = linkage.average(clusters[i], clusters[j])
                if best is None or distance < best[0]:
                    best = (distance, i, j)
        distance, i, j = best
        if distance > settings.distance_threshold:
            break
        clusters[i] = sorted(clusters[i] + clusters[j])
        del clusters[j]
        clusters.sort(key=lambda cluster: cluster[0])
    return make_grouping(clusters, matrices)


def enforce_min_size(grouping, settings):
    """Fold groups below min_group_size into their nearest group, smallest first."""
    linkage = _Linkage(grouping.matrices)
    groups = [list(group) for group in grouping.groups]
    while len(groups) > 1:
        small = [group for group in groups if len(group) < settings.min_group_size]
        if not small:
            break
        victim = min(small, key=lambda group: (len(group), group[0]))
        others = [group for group in groups if group is not victim]
        target = min(others, key=lambda group: (linkage.average(victim, group), group[0]))
        logger.debug(f"Merging undersized group {victim} into {target}")
        target.extend(victim)
        target.sort()
        groups.remove(victim)
    return make_grouping(groups, grouping.matrices)


def cluster_devices(observations, settings):
    return enforce_min_size(agglomerate(observations, settings), settings)


def fresh_bank_key(store, prefix='bank'):
    taken = set(store.bank_keys())
    n = 0
    while f'{prefix}{n}' in taken:
        n += 1
    return f'{prefix}{n}'


def assign_banks(grouping, previous, store):
    """
    Give every group a local bank, carrying banks over from the previous grouping.

    A group inherits the bank of the previous group with the nearest centroid.
    When several groups inherit one bank the largest keeps it and the others
    get clones. Without a previous grouping every group gets a clone of the
    store's freshly initialised bank. Banks no group inherits are dropped.
    """
    assignment = {}
    if previous is None or not previous.bank_assignment:
        initial = store.bank_keys()
        if len(initial) != 1:
            raise ProtocolError(
                f"Expected exactly one initial bank to clone, found {initial}")
        for index in range(len(grouping.groups)):
            key = fresh_bank_key(store)
            store.clone_bank(initial[0], key)
            assignment[index] = key
        store.drop_bank(initial[0])
        return replace(grouping, bank_assignment=assignment)

    claims = {}
    for index, centroid in enumerate(grouping.centroids):
        distances = [matrix_distance(centroid, c) for c in previous.centroids]
        nearest = int(np.argmin(distances))
        claims.setdefault(previous.bank_assignment[nearest], []).append(index)

    for bank, claimants in claims.items():
        keeper = max(claimants, key=lambda i: (len(grouping.groups[i]), -i))
        for index in claimants:
            if index == keeper:
                assignment[index] = bank
            else:
                key = fresh_bank_key(store)
                store.clone_bank(bank, key)
                assignment[index] = key
                logger.debug(f"Group {list(grouping.groups[index])} gets bank '{key}' "
                             f"cloned from '{bank}'")

    kept = set(assignment.values())
    for bank in set(previous.bank_assignment.values()) - kept:
        store.drop_bank(bank)
    return replace(grouping, bank_assignment=assignment)
