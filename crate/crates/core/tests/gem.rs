mod common;

use std::collections::BTreeMap;

use common::lp_oracle::{oracle_max_growth, oracle_medium_support, support, vertex_lp_max};
use genotrait::gem::{
    apply_perturbation, fba_max_growth, gem_observation, lp_solve, minimal_medium, restrict_medium, GemConfig,
    LpProblem, LpStatus, MetabolicModel, ModelSet, Perturbation, Reaction, Relation, Sense, Template,
};
use proptest::prelude::*;

fn toy_models() -> Vec<MetabolicModel> {
    ModelSet::builtin().models.into_values().collect()
}

#[test]
fn builtin_models_match_vertex_enumeration() {
    for base in toy_models() {
        for p in Perturbation::ALL {
            let m = apply_perturbation(&base, p).unwrap();
            let got = fba_max_growth(&m).unwrap();
            let want = oracle_max_growth(&m);
            assert!((got - want).abs() <= 1e-7, "{} {p:?}: {got} vs {want}", m.id);
        }
    }
}

#[test]
fn builtin_minimal_media_match_subset_enumeration() {
    for base in toy_models() {
        for p in Perturbation::ALL {
            let m = apply_perturbation(&base, p).unwrap();
            let mm = minimal_medium(&m, 0.1).unwrap();
            assert_eq!(support(&mm.uptakes), oracle_medium_support(&m, 0.1), "{} {p:?}", m.id);
        }
    }
}

#[test]
fn minimal_medium_replays_to_required_growth() {
    for base in toy_models() {
        for p in Perturbation::ALL {
            let m = apply_perturbation(&base, p).unwrap();
            let mm = minimal_medium(&m, 0.1).unwrap();
            if mm.growth_impossible {
                continue;
            }
            let replay = fba_max_growth(&restrict_medium(&m, &mm.uptakes)).unwrap();
            assert!(replay >= 0.1 * mm.mu_max - 1e-7, "{} {p:?}: {replay} < {}", m.id, 0.1 * mm.mu_max);
        }
    }
}

#[test]
fn perturbations_never_increase_growth() {
    let set = ModelSet::builtin();
    for cfg in GemConfig::all() {
        let base = set.get(cfg.template).unwrap();
        let mu0 = fba_max_growth(base).unwrap();
        let mu = fba_max_growth(&apply_perturbation(base, cfg.perturbation).unwrap()).unwrap();
        assert!(mu <= mu0 + 1e-9, "config {}", cfg.config_id);
    }
}

#[test]
fn essential_only_after_oxygen_removal() {
    let arch = ModelSet::builtin().get(Template::Archaeal).unwrap().clone();
    let before = minimal_medium(&arch, 0.1).unwrap();
    let after = minimal_medium(&apply_perturbation(&arch, Perturbation::RemoveO2).unwrap(), 0.1).unwrap();
    assert!(!before.uptakes.contains_key("EX_so4_e"));
    assert!(after.uptakes.contains_key("EX_so4_e"));
}

#[test]
fn gram_negative_oxygen_removal_observation() {
    let obs = gem_observation(&ModelSet::builtin(), 7).unwrap();
    assert_eq!(
        obs.to_json_string(),
        r#"{"tool":"gem_tool","configuration_id":7,"minimal_substrate_dict":{"EX_fe3_e":0.1,"EX_glc_e":1.0,"EX_no3_e":1.0,"EX_so4_e":0.2},"error":null}"#
    );
}

#[test]
fn all_five_removed_reports_no_growth() {
    for id in [6, 12, 18] {
        let obs = gem_observation(&ModelSet::builtin(), id).unwrap();
        assert!(obs.minimal_substrate_dict.is_empty());
        assert!(obs.error.is_some());
    }
}

fn small_model(n: usize, m: usize, coeffs: Vec<i32>, bounds: Vec<(i32, i32)>) -> MetabolicModel {
    let metabolites: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
    let reactions = (0..n)
        .map(|j| Reaction {
            id: format!("r{j}"),
            stoichiometry: (0..m)
                .filter(|&i| coeffs[i * n + j] != 0)
                .map(|i| (metabolites[i].clone(), coeffs[i * n + j] as f64))
                .collect::<BTreeMap<_, _>>(),
            lower_bound: bounds[j].0.min(bounds[j].1) as f64,
            upper_bound: bounds[j].0.max(bounds[j].1) as f64,
        })
        .collect();
    MetabolicModel {
        id: "random".into(),
        metabolites,
        reactions,
        biomass_reaction: "r0".into(),
        exchange_reactions: vec![],
        components: BTreeMap::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fba_matches_vertex_enumeration(
        n in 2usize..=6,
        m in 1usize..=3,
        coeffs in prop::collection::vec(-2i32..=2, 18),
        bounds in prop::collection::vec((-10i32..=10, -10i32..=10), 6),
    ) {
        let model = small_model(n, m, coeffs, bounds);
        let got = fba_max_growth(&model).unwrap();
        let want = oracle_max_growth(&model);
        prop_assert!((got - want).abs() <= 1e-7, "{got} vs {want}");
    }

    #[test]
    fn lp_matches_vertex_enumeration_with_rows(
        c in prop::collection::vec(-5i32..=5, 3),
        a in prop::collection::vec(-3i32..=3, 6),
        b in prop::collection::vec(-4i32..=6, 2),
        hi in prop::collection::vec(1i32..=8, 3),
    ) {
        // max c·x, A x = b, 0 ≤ x ≤ hi
        let c: Vec<f64> = c.into_iter().map(f64::from).collect();
        let rows: Vec<Vec<f64>> = a.chunks(3).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let bounds: Vec<(f64, f64)> = hi.iter().map(|&h| (0.0, h as f64)).collect();
        let mut p = LpProblem::new(Sense::Maximize, c.clone());
        for (r, &bi) in rows.iter().zip(&b) {
            p = p.constrain(r.clone(), Relation::Eq, bi);
        }
        p.bounds = bounds.clone();
        let sol = lp_solve(&p).unwrap();
        match vertex_lp_max(&rows, &b, &bounds, &c) {
            None => prop_assert_eq!(sol.status, LpStatus::Infeasible),
            Some((v, _)) => {
                prop_assert_eq!(sol.status, LpStatus::Optimal);
                prop_assert!((sol.objective - v).abs() <= 1e-7);
                prop_assert!(p.max_violation(&sol.x) <= 1e-7);
            }
        }
    }

    #[test]
    fn config_ids_round_trip(id in 1u32..=18) {
        let cfg = GemConfig::from_id(id).unwrap();
        prop_assert_eq!(GemConfig::id_of(cfg.template, cfg.perturbation), id);
    }
}
