//! Random instance generators shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use tsm_core::config::{Scenario, ScenarioConfig};
use tsm_core::model::{
    flatten_services, LinearConstraint, LocalVar, MarketNode, MarketTree, ResourceSpec, Sense,
    ServiceId, ServiceKind, Term, TopMarket,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn load_scenario(name: &str) -> Scenario {
    let root = repo_root();
    ScenarioConfig::load(&root.join("scenarios").join(name))
        .unwrap()
        .resolve(&root)
        .unwrap()
}

pub fn kinds(n: usize) -> Vec<ServiceKind> {
    [ServiceKind::Energy, ServiceKind::Regulation, ServiceKind::Reserve][..n].to_vec()
}

/// Shape of a random tree: parent index per aggregator (root is 0) and the
/// aggregator each leaf hangs under.
struct Shape {
    agg_parent: Vec<Option<usize>>,
    agg_depth: Vec<u32>,
    leaf_parent: Vec<usize>,
}

fn random_shape(r: &mut ChaCha8Rng, depth: u32, leaves: usize) -> Shape {
    let mut agg_parent = vec![None];
    let mut agg_depth = vec![0];
    // A chain guarantees the requested depth.
    for d in 1..depth {
        agg_parent.push(Some(agg_parent.len() - 1));
        agg_depth.push(d);
    }
    for _ in 0..r.gen_range(0..=2) {
        let shallow: Vec<usize> = (0..agg_depth.len())
            .filter(|&i| agg_depth[i] + 2 <= depth)
            .collect();
        if let Some(&p) = shallow.choose(r) {
            agg_parent.push(Some(p));
            agg_depth.push(agg_depth[p] + 1);
        }
    }
    // Every aggregator without aggregator children needs a leaf.
    let mut leaf_parent: Vec<usize> = (0..agg_parent.len())
        .filter(|&i| !agg_parent.contains(&Some(i)))
        .collect();
    while leaf_parent.len() < leaves {
        leaf_parent.push(r.gen_range(0..agg_parent.len()));
    }
    Shape {
        agg_parent,
        agg_depth,
        leaf_parent,
    }
}

fn assemble(shape: &Shape, leaves: Vec<MarketNode>) -> MarketNode {
    fn build(i: usize, shape: &Shape, leaves: &mut Vec<Option<MarketNode>>) -> MarketNode {
        let mut children = Vec::new();
        for (j, p) in shape.agg_parent.iter().enumerate() {
            if *p == Some(i) {
                children.push(build(j, shape, leaves));
            }
        }
        for (k, &p) in shape.leaf_parent.iter().enumerate() {
            if p == i {
                children.push(leaves[k].take().expect("each leaf placed once"));
            }
        }
        let name = if i == 0 { "ROOT".to_string() } else { format!("AGG{i}") };
        MarketNode::aggregator(name, children)
    }
    let mut slots: Vec<Option<MarketNode>> = leaves.into_iter().map(Some).collect();
    build(0, shape, &mut slots)
}

/// Integer box instance with fixed demand: even capacities, odd demand and
/// distinct costs per service, so the top market never clears on a
/// breakpoint and the optimum is unique.
pub fn integer_box_tree(r: &mut ChaCha8Rng, depth: u32, max_leaves: usize, services: usize) -> MarketTree {
    let n_leaves = r.gen_range(2..=max_leaves);
    let shape = random_shape(r, depth, n_leaves);
    let n_leaves = shape.leaf_parent.len();
    let set = flatten_services(&kinds(services), 1).unwrap();
    let mut costs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..services {
        let mut pool: Vec<u32> = (1..=99).collect();
        pool.shuffle(r);
        costs.push(pool[..n_leaves].iter().map(|&c| f64::from(c)).collect());
    }
    let mut total = vec![0.0; services];
    let leaves: Vec<MarketNode> = (0..n_leaves)
        .map(|k| {
            let mut spec = ResourceSpec::default();
            for (s, cs) in costs.iter().enumerate() {
                if services > 1 && r.gen_bool(0.25) {
                    continue;
                }
                let cap = f64::from(2 * r.gen_range(1..=10u32));
                total[s] += cap;
                spec.costs.insert(ServiceId(s), cs[k]);
                spec.capacities.insert(ServiceId(s), cap);
            }
            MarketNode::leaf(format!("L{k}"), spec)
        })
        .collect();
    let demand: BTreeMap<ServiceId, f64> = total
        .iter()
        .enumerate()
        .map(|(s, &t)| {
            let d = if t >= 2.0 {
                let half = (t / 2.0) as u32;
                f64::from(2 * r.gen_range(0..half) + 1)
            } else {
                0.0
            };
            (ServiceId(s), d)
        })
        .collect();
    MarketTree::new(set, assemble(&shape, leaves), TopMarket::Demand(demand)).unwrap()
}

/// Leaves of an integer tree sitting exactly at `depth`.
pub fn leaves_at_depth(tree: &MarketTree, depth: u32) -> Vec<String> {
    tree.root
        .walk(0)
        .into_iter()
        .filter(|(n, d)| n.is_leaf() && *d == depth)
        .map(|(n, _)| n.name.clone())
        .collect()
}

/// Continuous price-taking box instance.
pub fn price_taking_tree(r: &mut ChaCha8Rng, depth: u32, max_leaves: usize, services: usize) -> MarketTree {
    let n_leaves = r.gen_range(1..=max_leaves);
    let shape = random_shape(r, depth, n_leaves);
    let set = flatten_services(&kinds(services), 1).unwrap();
    let leaves = (0..shape.leaf_parent.len())
        .map(|k| {
            let offers: Vec<(ServiceId, f64, f64)> = (0..services)
                .map(|s| (ServiceId(s), r.gen_range(0.0..50.0), r.gen_range(0.5..10.0)))
                .collect();
            MarketNode::leaf(format!("L{k}"), ResourceSpec::boxed(offers))
        })
        .collect();
    let prices = (0..services)
        .map(|s| (ServiceId(s), r.gen_range(0.0..50.0)))
        .collect();
    MarketTree::new(set, assemble(&shape, leaves), TopMarket::PriceTaker(prices)).unwrap()
}

/// Price-taking single-service game with a shared feeder limit, so coalition
/// values are not additive. Leaf `TWIN` copies `L0` and `NULL` has no
/// capacity.
pub fn feeder_game(r: &mut ChaCha8Rng, others: usize) -> MarketTree {
    let s = ServiceId(0);
    let set = flatten_services(&[ServiceKind::Energy], 1).unwrap();
    let price = r.gen_range(20.0..60.0);
    let mut leaves = Vec::new();
    let base = (r.gen_range(0.0..20.0), r.gen_range(1.0..8.0));
    leaves.push(("L0".to_string(), base));
    leaves.push(("TWIN".to_string(), base));
    for k in 1..=others {
        leaves.push((format!("L{k}"), (r.gen_range(0.0..60.0), r.gen_range(1.0..8.0))));
    }
    let total: f64 = leaves.iter().map(|(_, (_, c))| c).sum();
    let limit = r.gen_range(0.3..0.9) * total;
    let mut nodes: Vec<MarketNode> = leaves
        .iter()
        .map(|(n, (c, k))| MarketNode::leaf(n.clone(), ResourceSpec::boxed([(s, *c, *k)])))
        .collect();
    nodes.push(MarketNode::leaf("NULL", ResourceSpec::boxed([(s, 1.0, 0.0)])));
    let feeder = LinearConstraint::new(
        "feeder",
        leaves
            .iter()
            .map(|(n, _)| Term::of(n.clone(), LocalVar::Service(s), 1.0))
            .collect(),
        Sense::Le,
        limit,
    );
    let root = MarketNode::aggregator("VPP", nodes).with_public_constraints(vec![feeder]);
    MarketTree::new(set, root, TopMarket::PriceTaker([(s, price)].into())).unwrap()
}
