//! Assignment of object fragments to storage nodes.
//!
//! Nodes are partitioned into disjoint clusters; every object lives entirely
//! inside one cluster, with its n fragments placed on n distinct nodes chosen
//! uniformly at random. A cluster size equal to n yields the fully clustered
//! placement where every node of the cluster holds one fragment of every
//! object stored there; a single cluster spanning all nodes yields the plain
//! random placement.

use std::io;

use rand::Rng;
use thiserror::Error;

pub type NodeId = usize;
pub type ObjectId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlacementError {
    #[error("cluster size {cluster_size} is smaller than the fragment count {n}")]
    ClusterTooSmall { cluster_size: usize, n: usize },
    #[error("total node count {n_total} is not divisible by the cluster size {cluster_size}")]
    UnevenClusters { n_total: usize, cluster_size: usize },
    #[error("node count and fragment count must be positive")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementConfig {
    /// Total number of storage nodes.
    pub n_total: usize,
    /// Nodes per cluster; must divide `n_total`.
    pub cluster_size: usize,
    /// Objects stored in each cluster.
    pub objects_per_cluster: usize,
    /// Fragments per object.
    pub fragments_per_object: usize,
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.n_total == 0 || self.fragments_per_object == 0 || self.cluster_size == 0 {
            return Err(PlacementError::Empty);
        }
        if self.cluster_size < self.fragments_per_object {
            return Err(PlacementError::ClusterTooSmall {
                cluster_size: self.cluster_size,
                n: self.fragments_per_object,
            });
        }
        if self.n_total % self.cluster_size != 0 {
            return Err(PlacementError::UnevenClusters {
                n_total: self.n_total,
                cluster_size: self.cluster_size,
            });
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.n_total / self.cluster_size
    }

    pub fn total_objects(&self) -> usize {
        self.clusters() * self.objects_per_cluster
    }
}

/// Immutable forward and reverse fragment-to-node assignment.
#[derive(Debug, Clone)]
pub struct PlacementMap {
    config: PlacementConfig,
    /// `objects[o]` lists the n distinct nodes holding object o's fragments.
    objects: Vec<Vec<NodeId>>,
    /// `by_node[v]` lists the (object, fragment index) entries stored on v.
    by_node: Vec<Vec<(ObjectId, usize)>>,
}

impl PlacementMap {
    /// Places every object's fragments on distinct nodes drawn uniformly
    /// without replacement from its cluster. Deterministic for a given rng.
    pub fn place(config: PlacementConfig, rng: &mut impl Rng) -> Result<Self, PlacementError> {
        config.validate()?;
        let n = config.fragments_per_object;
        let mut objects = Vec::with_capacity(config.total_objects());
        let mut by_node: Vec<Vec<(ObjectId, usize)>> = vec![Vec::new(); config.n_total];
        for cluster in 0..config.clusters() {
            let base = cluster * config.cluster_size;
            for _ in 0..config.objects_per_cluster {
                let object = objects.len();
                let picks = rand::seq::index::sample(rng, config.cluster_size, n);
                let nodes: Vec<NodeId> = picks.iter().map(|i| base + i).collect();
                for (frag, &node) in nodes.iter().enumerate() {
                    by_node[node].push((object, frag));
                }
                objects.push(nodes);
            }
        }
        Ok(PlacementMap {
            config,
            objects,
            by_node,
        })
    }

    /// Builds a map from explicit assignments (replaying a dumped placement
    /// or constructing exact scenarios). Invariants are fully checked.
    pub fn from_assignments(
        config: PlacementConfig,
        objects: Vec<Vec<NodeId>>,
    ) -> Result<Self, PlacementError> {
        config.validate()?;
        let mut by_node: Vec<Vec<(ObjectId, usize)>> = vec![Vec::new(); config.n_total];
        for (object, nodes) in objects.iter().enumerate() {
            if nodes.len() != config.fragments_per_object {
                return Err(PlacementError::Empty);
            }
            let cluster = nodes[0] / config.cluster_size;
            let base = cluster * config.cluster_size;
            let mut seen = std::collections::HashSet::new();
            for (frag, &node) in nodes.iter().enumerate() {
                if node < base || node >= base + config.cluster_size || !seen.insert(node) {
                    return Err(PlacementError::ClusterTooSmall {
                        cluster_size: config.cluster_size,
                        n: config.fragments_per_object,
                    });
                }
                by_node[node].push((object, frag));
            }
        }
        Ok(PlacementMap {
            config,
            objects,
            by_node,
        })
    }

    pub fn config(&self) -> &PlacementConfig {
        &self.config
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.config.n_total
    }

    /// Nodes holding the fragments of one object, indexed by fragment.
    pub fn object_nodes(&self, object: ObjectId) -> &[NodeId] {
        &self.objects[object]
    }

    /// Reverse-index lookup: everything stored on one node.
    pub fn fragments_on_node(&self, node: NodeId) -> &[(ObjectId, usize)] {
        &self.by_node[node]
    }

    pub fn cluster_of_object(&self, object: ObjectId) -> usize {
        self.objects[object][0] / self.config.cluster_size
    }

    pub fn cluster_of_node(&self, node: NodeId) -> usize {
        node / self.config.cluster_size
    }

    /// Node-id range of one cluster.
    pub fn cluster_nodes(&self, cluster: usize) -> std::ops::Range<NodeId> {
        let base = cluster * self.config.cluster_size;
        base..base + self.config.cluster_size
    }

    /// CSV dump with columns `object,fragment,node`.
    pub fn write_csv(&self, mut w: impl io::Write) -> io::Result<()> {
        writeln!(w, "object,fragment,node")?;
        for (object, nodes) in self.objects.iter().enumerate() {
            for (fragment, node) in nodes.iter().enumerate() {
                writeln!(w, "{object},{fragment},{node}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg(n_total: usize, cluster: usize, objects: usize, n: usize) -> PlacementConfig {
        PlacementConfig {
            n_total,
            cluster_size: cluster,
            objects_per_cluster: objects,
            fragments_per_object: n,
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert_eq!(
            PlacementMap::place(cfg(10, 5, 1, 7), &mut rng).unwrap_err(),
            PlacementError::ClusterTooSmall { cluster_size: 5, n: 7 }
        );
        assert_eq!(
            PlacementMap::place(cfg(10, 7, 1, 7), &mut rng).unwrap_err(),
            PlacementError::UnevenClusters { n_total: 10, cluster_size: 7 }
        );
    }

    #[test]
    fn fully_clustered_placement_puts_every_object_on_every_node() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let map = PlacementMap::place(cfg(21, 7, 30, 7), &mut rng).unwrap();
        assert_eq!(map.num_objects(), 90);
        for node in 0..21 {
            assert_eq!(map.fragments_on_node(node).len(), 30);
        }
    }

    #[test]
    fn empty_cluster_gives_empty_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let map = PlacementMap::place(cfg(14, 7, 0, 7), &mut rng).unwrap();
        assert_eq!(map.num_objects(), 0);
        assert!(map.fragments_on_node(3).is_empty());
    }

    #[test]
    fn conservation_distinctness_and_cluster_closure() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let config = cfg(100, 50, 200, 7);
        let map = PlacementMap::place(config, &mut rng).unwrap();
        let total: usize = (0..100).map(|v| map.fragments_on_node(v).len()).sum();
        assert_eq!(total, 7 * map.num_objects());
        for object in 0..map.num_objects() {
            let nodes = map.object_nodes(object);
            let cluster = map.cluster_of_object(object);
            let mut distinct = std::collections::HashSet::new();
            for &node in nodes {
                assert!(map.cluster_nodes(cluster).contains(&node));
                assert!(distinct.insert(node), "duplicate node within an object");
            }
        }
        // Reverse index must agree with the forward map.
        for node in 0..100 {
            for &(object, fragment) in map.fragments_on_node(node) {
                assert_eq!(map.object_nodes(object)[fragment], node);
            }
        }
    }

    #[test]
    fn load_concentrates_around_the_mean_on_random_placement() {
        // 1000 nodes, 10_000 objects of 7 fragments: 70 per node on average.
        // Per-node loads averaged over seeds stay within 30% of the mean.
        let seeds = 10u64;
        let mut load = vec![0.0f64; 1000];
        for seed in 0..seeds {
            let mut rng = ChaCha12Rng::seed_from_u64(11 + seed);
            let map = PlacementMap::place(cfg(1000, 1000, 10_000, 7), &mut rng).unwrap();
            for (node, acc) in load.iter_mut().enumerate() {
                *acc += map.fragments_on_node(node).len() as f64 / seeds as f64;
            }
        }
        for (node, &avg) in load.iter().enumerate() {
            assert!(
                (avg - 70.0).abs() <= 0.3 * 70.0,
                "node {node} seed-averaged load {avg} strays more than 30% from the mean"
            );
        }
    }

    #[test]
    fn identical_seeds_give_identical_maps() {
        let config = cfg(60, 20, 50, 7);
        let a = PlacementMap::place(config, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let b = PlacementMap::place(config, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.objects, b.objects);
        let c = PlacementMap::place(config, &mut ChaCha12Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a.objects, c.objects);
    }

    #[test]
    fn csv_dump_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let map = PlacementMap::place(cfg(7, 7, 2, 7), &mut rng).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 7);
        assert!(text.starts_with("object,fragment,node\n"));
    }
}
