//! Simulated Rowhammer deployment: an offline-profiled map of flippable
//! DRAM bits, and a page-placement matcher that decides whether an exported
//! flip plan is physically realizable.
//!
//! The decision is a maximum bipartite matching between weight pages that
//! need flips and physical pages that offer them, so an Infeasible verdict
//! is a proof, not a search failure. Pages move as units: every flip a
//! weight page needs must be offered by its single assigned physical page.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::bitcodec::{FlipDirection, QuantKind};
use crate::engine::PlannedFlip;
use crate::error::{Error, Result};
use crate::model::{tensor_image_offset, ToyModel};

/// 4 KiB pages.
pub const DEFAULT_PAGE_SIZE_BITS: u32 = 32_768;
/// 4 GiB of DRAM in 4 KiB pages.
pub const DEFAULT_PAGE_COUNT: u64 = 1 << 20;

/// Measured flippable-bit counts for one profiled 4 GiB module, used as the
/// default density calibration: 2,736,537 cells flip 0→1 and 2,753,496 flip
/// 1→0 out of 2^35 bits.
pub const PROFILE_ZERO_TO_ONE: u64 = 2_736_537;
pub const PROFILE_ONE_TO_ZERO: u64 = 2_753_496;

/// Per-direction densities matching the profiled module.
pub fn paper_density_per_direction() -> (f64, f64) {
    let bits = (DEFAULT_PAGE_COUNT * DEFAULT_PAGE_SIZE_BITS as u64) as f64;
    (
        PROFILE_ZERO_TO_ONE as f64 / bits,
        PROFILE_ONE_TO_ZERO as f64 / bits,
    )
}

/// One vulnerable DRAM cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerableBit {
    pub page_id: u64,
    pub bit_offset: u32,
    pub direction: FlipDirection,
}

/// Offline fault profile over simulated DRAM pages.
#[derive(Debug, Clone)]
pub struct FlipProfile {
    pub seed: u64,
    pub page_count: u64,
    pub page_size_bits: u32,
    vulnerable: Vec<VulnerableBit>,
    /// (bit_offset, direction) -> sorted pages offering it.
    index: HashMap<(u32, FlipDirection), Vec<u64>>,
}

impl FlipProfile {
    pub fn vulnerable_bits(&self) -> &[VulnerableBit] {
        &self.vulnerable
    }

    pub fn count_by_direction(&self, direction: FlipDirection) -> usize {
        self.vulnerable.iter().filter(|v| v.direction == direction).count()
    }

    /// Pages offering a specific (offset, direction) flip.
    pub fn pages_offering(&self, bit_offset: u32, direction: FlipDirection) -> &[u64] {
        self.index
            .get(&(bit_offset, direction))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Uniform random profile at the requested per-direction densities,
/// deterministic per seed.
pub fn generate_profile(
    seed: u64,
    page_count: u64,
    page_size_bits: u32,
    density_zero_to_one: f64,
    density_one_to_zero: f64,
) -> FlipProfile {
    assert!(density_zero_to_one >= 0.0 && density_one_to_zero >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD7A0);
    let mut vulnerable = Vec::new();
    let mut index: HashMap<(u32, FlipDirection), Vec<u64>> = HashMap::new();
    let dirs = [
        (FlipDirection::ZeroToOne, density_zero_to_one),
        (FlipDirection::OneToZero, density_one_to_zero),
    ];
    let binos: Vec<Option<Binomial>> = dirs
        .iter()
        .map(|&(_, p)| {
            if p > 0.0 {
                Some(Binomial::new(page_size_bits as u64, p).expect("valid binomial"))
            } else {
                None
            }
        })
        .collect();
    for page_id in 0..page_count {
        for ((direction, _), bino) in dirs.iter().zip(&binos) {
            let Some(bino) = bino else { continue };
            let count = bino.sample(&mut rng);
            let mut offsets: Vec<u32> = Vec::with_capacity(count as usize);
            while offsets.len() < count as usize {
                let off = rng.gen_range(0..page_size_bits);
                if !offsets.contains(&off) {
                    offsets.push(off);
                }
            }
            offsets.sort_unstable();
            for off in offsets {
                vulnerable.push(VulnerableBit {
                    page_id,
                    bit_offset: off,
                    direction: *direction,
                });
                index.entry((off, *direction)).or_default().push(page_id);
            }
        }
    }
    FlipProfile {
        seed,
        page_count,
        page_size_bits,
        vulnerable,
        index,
    }
}

/// One plan flip located in the weight memory image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredFlip {
    pub weight_page: u64,
    pub bit_offset: u32,
    pub direction: FlipDirection,
    pub layer_name: String,
    pub weight_index: usize,
    pub bit_position: u8,
}

/// Map an exported plan onto the checkpoint's linear memory image. The flip
/// direction is derived by replaying the plan over the image, so a bit
/// flipped twice carries the direction it needs at each application.
pub fn plan_to_required(
    model: &ToyModel,
    plan: &[PlannedFlip],
    page_size_bits: u32,
) -> Result<Vec<RequiredFlip>> {
    let bytes_per = match model.kind {
        QuantKind::Bf16 => 2usize,
        QuantKind::Int8 => 1usize,
    };
    let mut image = crate::model::memory_image(model);
    let page_bytes = page_size_bits as usize / 8;
    let mut out = Vec::with_capacity(plan.len());
    for flip in plan {
        if flip.layer_id >= model.tensors.len() {
            return Err(Error::PlanOutOfLayout(format!("layer {}", flip.layer_id)));
        }
        let tensor = model.tensor(flip.layer_id);
        if flip.weight_index >= tensor.len() || flip.bit_position as usize >= bytes_per * 8 {
            return Err(Error::PlanOutOfLayout(format!(
                "{} index {} bit {}",
                flip.layer_name, flip.weight_index, flip.bit_position
            )));
        }
        let base = tensor_image_offset(model, flip.layer_id);
        let byte_index = base + flip.weight_index * bytes_per + (flip.bit_position as usize) / 8;
        let bit_in_byte = flip.bit_position % 8;
        let current = (image[byte_index] >> bit_in_byte) & 1;
        let direction = if current == 0 {
            FlipDirection::ZeroToOne
        } else {
            FlipDirection::OneToZero
        };
        image[byte_index] ^= 1 << bit_in_byte;
        out.push(RequiredFlip {
            weight_page: (byte_index / page_bytes) as u64,
            bit_offset: ((byte_index % page_bytes) * 8) as u32 + bit_in_byte as u32,
            direction,
            layer_name: flip.layer_name.clone(),
            weight_index: flip.weight_index,
            bit_position: flip.bit_position,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlacementStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageAssignment {
    pub weight_page: u64,
    pub physical_page: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub status: PlacementStatus,
    pub assignments: Vec<PageAssignment>,
    pub satisfied: Vec<RequiredFlip>,
    pub unsatisfied: Vec<RequiredFlip>,
}

/// Group flips by weight page and find, for each group, the physical pages
/// offering every flip in the group.
fn group_candidates(
    required: &[RequiredFlip],
    profile: &FlipProfile,
) -> Vec<(u64, Vec<RequiredFlip>, Vec<u64>)> {
    let mut groups: BTreeMap<u64, Vec<RequiredFlip>> = BTreeMap::new();
    for flip in required {
        groups.entry(flip.weight_page).or_default().push(flip.clone());
    }
    groups
        .into_iter()
        .map(|(page, flips)| {
            let mut candidates: Option<Vec<u64>> = None;
            for flip in &flips {
                let offering = profile.pages_offering(flip.bit_offset, flip.direction);
                candidates = Some(match candidates {
                    None => offering.to_vec(),
                    Some(cur) => intersect_sorted(&cur, offering),
                });
                if candidates.as_ref().is_some_and(|c| c.is_empty()) {
                    break;
                }
            }
            (page, flips, candidates.unwrap_or_default())
        })
        .collect()
}

fn intersect_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Kuhn's augmenting-path maximum matching over group -> candidate pages.
fn maximum_matching(adjacency: &[Vec<usize>], right_size: usize) -> Vec<Option<usize>> {
    let mut matched_right: Vec<Option<usize>> = vec![None; right_size];
    fn try_augment(
        left: usize,
        adjacency: &[Vec<usize>],
        seen: &mut [bool],
        matched_right: &mut [Option<usize>],
    ) -> bool {
        for &r in &adjacency[left] {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            if matched_right[r].is_none()
                || try_augment(matched_right[r].unwrap(), adjacency, seen, matched_right)
            {
                matched_right[r] = Some(left);
                return true;
            }
        }
        false
    }
    for left in 0..adjacency.len() {
        let mut seen = vec![false; right_size];
        try_augment(left, adjacency, &mut seen, &mut matched_right);
    }
    matched_right
}

/// Decide whether a plan's required flips can be realized by an injective
/// weight-page -> physical-page placement over the profile.
pub fn match_plan(required: &[RequiredFlip], profile: &FlipProfile) -> PlacementPlan {
    let groups = group_candidates(required, profile);

    // Compress candidate pages into a dense right-side index.
    let mut page_index: BTreeMap<u64, usize> = BTreeMap::new();
    for (_, _, candidates) in &groups {
        for &p in candidates {
            let next = page_index.len();
            page_index.entry(p).or_insert(next);
        }
    }
    let mut pages = vec![0u64; page_index.len()];
    for (&page, &idx) in &page_index {
        pages[idx] = page;
    }
    let adjacency: Vec<Vec<usize>> = groups
        .iter()
        .map(|(_, _, candidates)| candidates.iter().map(|p| page_index[p]).collect())
        .collect();
    let matched_right = maximum_matching(&adjacency, pages.len());

    let mut left_assignment: Vec<Option<u64>> = vec![None; groups.len()];
    for (r, left) in matched_right.iter().enumerate() {
        if let Some(l) = left {
            left_assignment[*l] = Some(pages[r]);
        }
    }

    let mut assignments = Vec::new();
    let mut satisfied = Vec::new();
    let mut unsatisfied = Vec::new();
    for ((page, flips, _), assigned) in groups.into_iter().zip(left_assignment) {
        match assigned {
            Some(physical) => {
                assignments.push(PageAssignment {
                    weight_page: page,
                    physical_page: physical,
                });
                satisfied.extend(flips);
            }
            None => unsatisfied.extend(flips),
        }
    }
    PlacementPlan {
        status: if unsatisfied.is_empty() {
            PlacementStatus::Feasible
        } else {
            PlacementStatus::Infeasible
        },
        assignments,
        satisfied,
        unsatisfied,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::QuantKind;
    use crate::model::tests::tiny_model;

    fn profile_from_bits(bits: Vec<VulnerableBit>, page_count: u64, page_size_bits: u32) -> FlipProfile {
        let mut index: HashMap<(u32, FlipDirection), Vec<u64>> = HashMap::new();
        for b in &bits {
            index.entry((b.bit_offset, b.direction)).or_default().push(b.page_id);
        }
        for pages in index.values_mut() {
            pages.sort_unstable();
        }
        FlipProfile {
            seed: 0,
            page_count,
            page_size_bits,
            vulnerable: bits,
            index,
        }
    }

    fn required(page: u64, offset: u32, direction: FlipDirection) -> RequiredFlip {
        RequiredFlip {
            weight_page: page,
            bit_offset: offset,
            direction,
            layer_name: "t".into(),
            weight_index: 0,
            bit_position: 0,
        }
    }

    #[test]
    fn zero_density_profile_is_empty() {
        let p = generate_profile(1, 64, 256, 0.0, 0.0);
        assert!(p.vulnerable_bits().is_empty());
    }

    #[test]
    fn profile_counts_match_binomial_expectation() {
        let pages = 2048u64;
        let bits = 4096u32;
        let density = 2e-3;
        let p = generate_profile(7, pages, bits, density, density);
        let n = (pages as f64) * (bits as f64) * density;
        let sigma = (n * (1.0 - density)).sqrt();
        for dir in [FlipDirection::ZeroToOne, FlipDirection::OneToZero] {
            let count = p.count_by_direction(dir) as f64;
            assert!(
                (count - n).abs() <= 3.0 * sigma,
                "{dir:?}: {count} vs expected {n} (sigma {sigma:.1})"
            );
        }
        // Determinism per seed.
        let q = generate_profile(7, pages, bits, density, density);
        assert_eq!(p.vulnerable_bits(), q.vulnerable_bits());
        let r = generate_profile(8, pages, bits, density, density);
        assert_ne!(p.vulnerable_bits(), r.vulnerable_bits());
    }

    #[test]
    fn empty_plan_is_feasible() {
        let p = generate_profile(1, 16, 256, 0.01, 0.01);
        let placement = match_plan(&[], &p);
        assert_eq!(placement.status, PlacementStatus::Feasible);
        assert!(placement.assignments.is_empty());
    }

    #[test]
    fn unoffered_flip_is_infeasible_and_listed() {
        let bits = vec![VulnerableBit {
            page_id: 0,
            bit_offset: 5,
            direction: FlipDirection::ZeroToOne,
        }];
        let p = profile_from_bits(bits, 4, 256);
        let need = vec![required(0, 5, FlipDirection::OneToZero)];
        let placement = match_plan(&need, &p);
        assert_eq!(placement.status, PlacementStatus::Infeasible);
        assert_eq!(placement.unsatisfied, need);
    }

    #[test]
    fn multi_flip_page_needs_one_physical_page_with_all() {
        let mk = |page, off, dir| VulnerableBit {
            page_id: page,
            bit_offset: off,
            direction: dir,
        };
        // Page 0 offers only offset 1; page 1 offers both required bits.
        let p = profile_from_bits(
            vec![
                mk(0, 1, FlipDirection::ZeroToOne),
                mk(1, 1, FlipDirection::ZeroToOne),
                mk(1, 9, FlipDirection::OneToZero),
            ],
            2,
            256,
        );
        let need = vec![
            required(7, 1, FlipDirection::ZeroToOne),
            required(7, 9, FlipDirection::OneToZero),
        ];
        let placement = match_plan(&need, &p);
        assert_eq!(placement.status, PlacementStatus::Feasible);
        assert_eq!(placement.assignments.len(), 1);
        assert_eq!(placement.assignments[0].physical_page, 1);
    }

    #[test]
    fn assignments_are_injective_and_valid() {
        let p = generate_profile(11, 512, 512, 5e-3, 5e-3);
        // Build a plan from bits the profile actually offers, one per page.
        let mut need = Vec::new();
        for (i, b) in p.vulnerable_bits().iter().enumerate().take(20) {
            need.push(required(i as u64, b.bit_offset, b.direction));
        }
        let placement = match_plan(&need, &p);
        let mut used = std::collections::BTreeSet::new();
        for a in &placement.assignments {
            assert!(used.insert(a.physical_page), "physical page assigned twice");
        }
        for flip in &placement.satisfied {
            let page = placement
                .assignments
                .iter()
                .find(|a| a.weight_page == flip.weight_page)
                .unwrap()
                .physical_page;
            assert!(p
                .pages_offering(flip.bit_offset, flip.direction)
                .contains(&page));
        }
    }

    /// Exhaustive maximum matching by recursion, for small instances.
    fn brute_max_matching(adjacency: &[Vec<usize>], right: usize) -> usize {
        fn go(adj: &[Vec<usize>], left: usize, used: &mut Vec<bool>) -> usize {
            if left == adj.len() {
                return 0;
            }
            // Skip this left node.
            let mut best = go(adj, left + 1, used);
            for &r in &adj[left] {
                if !used[r] {
                    used[r] = true;
                    best = best.max(1 + go(adj, left + 1, used));
                    used[r] = false;
                }
            }
            best
        }
        go(adjacency, 0, &mut vec![false; right])
    }

    #[test]
    fn matching_is_maximum_on_small_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let left = rng.gen_range(1..6usize);
            let right = rng.gen_range(1..6usize);
            let adjacency: Vec<Vec<usize>> = (0..left)
                .map(|_| (0..right).filter(|_| rng.gen_bool(0.4)).collect())
                .collect();
            let matched = maximum_matching(&adjacency, right);
            let size = matched.iter().filter(|m| m.is_some()).count();
            assert_eq!(size, brute_max_matching(&adjacency, right));
        }
    }

    #[test]
    fn plan_layout_math_and_direction_replay() {
        let model = tiny_model(61, QuantKind::Bf16);
        let image = crate::model::memory_image(&model);
        let layer_id = model.head_layer_id;
        let base = crate::model::tensor_image_offset(&model, layer_id);
        let plan = vec![
            PlannedFlip {
                layer_id,
                layer_name: "lm_head".into(),
                weight_index: 3,
                bit_position: 9,
                direction: FlipDirection::ZeroToOne, // overwritten by replay
            },
            // Same bit again: second application must need the opposite move.
            PlannedFlip {
                layer_id,
                layer_name: "lm_head".into(),
                weight_index: 3,
                bit_position: 9,
                direction: FlipDirection::ZeroToOne,
            },
        ];
        let page_size_bits = 256u32;
        let required = plan_to_required(&model, &plan, page_size_bits).unwrap();
        let byte_index = base + 3 * 2 + 1; // bit 9 lives in the high byte
        assert_eq!(required[0].weight_page, (byte_index / 32) as u64);
        assert_eq!(
            required[0].bit_offset,
            ((byte_index % 32) * 8 + 1) as u32
        );
        let original_bit = (image[byte_index] >> 1) & 1;
        let expect_first = if original_bit == 0 {
            FlipDirection::ZeroToOne
        } else {
            FlipDirection::OneToZero
        };
        assert_eq!(required[0].direction, expect_first);
        assert_ne!(required[1].direction, required[0].direction);
    }

    #[test]
    fn plan_outside_layout_is_rejected() {
        let model = tiny_model(61, QuantKind::Bf16);
        let plan = vec![PlannedFlip {
            layer_id: 99,
            layer_name: "nope".into(),
            weight_index: 0,
            bit_position: 0,
            direction: FlipDirection::ZeroToOne,
        }];
        assert!(plan_to_required(&model, &plan, 32_768).is_err());
    }

    #[test]
    fn paper_density_reproduces_module_counts() {
        let (d01, d10) = paper_density_per_direction();
        let bits = (DEFAULT_PAGE_COUNT * DEFAULT_PAGE_SIZE_BITS as u64) as f64;
        assert!((d01 * bits - PROFILE_ZERO_TO_ONE as f64).abs() < 1.0);
        assert!((d10 * bits - PROFILE_ONE_TO_ZERO as f64).abs() < 1.0);
    }
}
