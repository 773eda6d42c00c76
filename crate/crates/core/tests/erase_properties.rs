use eraserelu_core::arch::{build_network, summarize, to_after_activation, validate, ArchGraph, BuildOptions, Family, Network, Style};
use eraserelu_core::erase::{apply_erase, select_modules, Location};
use eraserelu_core::nn::Mode;
use eraserelu_core::{CounterRng, Fill, Tape, Tensor};
use proptest::prelude::*;

fn options(f: Family) -> BuildOptions {
    BuildOptions {
        num_classes: if matches!(f, Family::ScalarNet { .. }) { 1 } else { 10 },
        ..Default::default()
    }
}

fn after_activation(f: Family) -> ArchGraph {
    let g = build_network(f, options(f)).unwrap();
    if g.style == Style::PreActivation {
        to_after_activation(&g).unwrap().0
    } else {
        g
    }
}

fn family() -> impl Strategy<Value = Family> {
    proptest::sample::select(Family::catalog())
}

fn location() -> impl Strategy<Value = Location> {
    prop_oneof![Just(Location::Last), Just(Location::First)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn counts_are_preserved_and_relus_drop_by_erasures(f in family(), p in 0.0f64..=1.0, loc in location()) {
        let g = after_activation(f);
        let (e, plan) = apply_erase(&g, p, loc).unwrap();
        let (a, b) = (summarize(&g).unwrap(), summarize(&e).unwrap());
        prop_assert_eq!(a.param_count, b.param_count);
        prop_assert_eq!(a.mult_adds, b.mult_adds);
        prop_assert_eq!(a.weighted_layers, b.weighted_layers);
        prop_assert_eq!(a.relu_count - b.relu_count, plan.erasures.len());
        prop_assert!(validate(&e).is_empty());
        let reparsed = ArchGraph::from_json(&e.to_json()).unwrap();
        prop_assert_eq!(&reparsed, &e);
    }

    #[test]
    fn relu_count_is_monotone_in_proportion(f in family(), p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let g = after_activation(f);
        let r_lo = summarize(&apply_erase(&g, lo, Location::Last).unwrap().0).unwrap().relu_count;
        let r_hi = summarize(&apply_erase(&g, hi, Location::Last).unwrap().0).unwrap().relu_count;
        prop_assert!(r_lo >= r_hi);
    }

    #[test]
    fn selection_is_sorted_in_range_and_sized(p in 0.0f64..=1.0, n in 1usize..200) {
        let s = select_modules(p, n).unwrap();
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&m| (1..=n).contains(&m)));
        if p == 0.0 {
            prop_assert!(s.is_empty());
        }
    }
}

#[test]
fn full_erase_is_idempotent() {
    for f in Family::catalog() {
        let g = after_activation(f);
        let (once, _) = apply_erase(&g, 1.0, Location::Last).unwrap();
        let (twice, plan) = apply_erase(&once, 1.0, Location::Last).unwrap();
        assert_eq!(once.nodes.len(), twice.nodes.len(), "{f}");
        for m in 0..once.modules.len() {
            assert_eq!(once.module_signature(m + 1), twice.module_signature(m + 1), "{f}");
        }
        assert!(plan.erasures.is_empty(), "{f}");
        assert_eq!(plan.skipped_modules, plan.selected_modules, "{f}");
    }
}

#[test]
fn zero_proportion_is_byte_identical() {
    for f in Family::catalog() {
        let g = after_activation(f);
        assert_eq!(apply_erase(&g, 0.0, Location::Last).unwrap().0.to_json(), g.to_json(), "{f}");
    }
}

#[test]
fn half_of_six_modules_selects_odd_indices() {
    assert_eq!(select_modules(0.5, 6).unwrap(), [1, 3, 5]);
}

/// With positive weights and inputs and large normalization shifts, every
/// erased ReLU sees a positive input, so removing it cannot change outputs.
#[test]
fn erased_net_matches_original_on_positive_domain() {
    let families = [
        Family::Mlp12,
        Family::ResnetBasic { depth: 8 },
        Family::ResnetBottleneck { depth: 11 },
        Family::ScalarNet { depth: 4, width: 12 },
    ];
    for f in families {
        let g = after_activation(f);
        let (erased, plan) = apply_erase(&g, 1.0, Location::Last).unwrap();
        assert!(!plan.erasures.is_empty());
        let weights = CounterRng::new(17);
        let mut a = Network::<f64>::new(g.clone(), &weights).unwrap();
        let mut b = Network::<f64>::new(erased, &weights).unwrap();
        let names: Vec<String> = a.params().into_iter().map(|p| p.name).collect();
        for net in [&mut a, &mut b] {
            for (name, t) in names.iter().zip(net.params_mut()) {
                let shift = name.ends_with(".beta");
                t.data_mut().iter_mut().for_each(|v| *v = if shift { 5.0 } else { v.abs() * 0.1 + 0.01 });
            }
        }
        let mut shape = vec![3];
        shape.extend(&g.input_shape);
        let x = Tensor::<f64>::create(&shape, Fill::Uniform { low: 0.1, high: 1.0 }, &mut CounterRng::new(3)).unwrap();
        let run = |net: &mut Network<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let pass = net.forward(&mut tape, xv, Mode::Eval, &mut CounterRng::new(0), false).unwrap();
            for &id in &plan.erased_node_ids {
                if let Some(relu) = pass.node(id) {
                    let input = tape.inputs(relu)[0];
                    assert!(tape.value(input).data().iter().all(|&v| v > 0.0), "{f}: node {id}");
                }
            }
            tape.value(pass.output).data().to_vec()
        };
        let (ya, yb) = (run(&mut a), run(&mut b));
        assert!(ya.iter().all(|v| v.is_finite()));
        assert_eq!(ya, yb, "{f}");
    }
}
