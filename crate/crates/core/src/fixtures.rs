//! Bundled example data: a 29-county New Mexico contiguity list (the four
//! least populous counties are omitted) and a fixed 29 x 15 population grid
//! drawn once from log-uniform [500, 50000] with mild linear growth. Both
//! are committed so simulations and tests never reach for external data.
//! `graphs::lattice_adjacency` provides a synthetic fallback of any size.

use crate::graphs::Adjacency;

const NM_ADJACENCY_CSV: &str = include_str!("../data/nm_adjacency.csv");
const NM_POPULATIONS_CSV: &str = include_str!("../data/nm_populations.csv");

/// Unit ids (county names) in fixture order. The default simulation treats
/// the first six.
pub fn nm_unit_ids() -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for line in NM_POPULATIONS_CSV.lines().skip(1) {
        let unit = line.split(',').next().expect("fixture row");
        if ids.last().map(String::as_str) != Some(unit) {
            ids.push(unit.to_string());
        }
    }
    ids
}

/// The bundled 29-unit contiguity adjacency.
pub fn nm_adjacency() -> Adjacency {
    let ids = nm_unit_ids();
    let index = |name: &str| -> usize {
        ids.iter()
            .position(|u| u == name)
            .unwrap_or_else(|| panic!("unknown fixture unit {name}"))
    };
    let edges = NM_ADJACENCY_CSV.lines().skip(1).map(|line| {
        let mut parts = line.split(',');
        let a = parts.next().expect("id_a");
        let b = parts.next().expect("id_b");
        (index(a), index(b))
    });
    Adjacency::from_edges(ids.len(), edges).expect("fixture adjacency is valid")
}

/// The bundled population grid, row-major `[unit][time]`, 29 x 15.
pub fn nm_populations() -> Vec<Vec<f64>> {
    let ids = nm_unit_ids();
    let mut grid = vec![vec![0.0f64; 15]; ids.len()];
    for line in NM_POPULATIONS_CSV.lines().skip(1) {
        let mut parts = line.split(',');
        let unit = parts.next().expect("unit");
        let time: usize = parts.next().expect("time").parse().expect("time int");
        let pop: f64 = parts.next().expect("population").parse().expect("pop num");
        let i = ids.iter().position(|u| u == unit).expect("known unit");
        grid[i][time - 1] = pop;
    }
    grid
}
