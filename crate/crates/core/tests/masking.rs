use rand::seq::SliceRandom;
use rand::Rng as _;

use sodade::dataio::N_PROPS;
use sodade::model::{ModelConfig, Transformer};
use sodade::rng::{seeded, Rng};
use sodade::seqgen::{MaskedBatch, MaskedItem};

fn config(layers: usize, type_token: bool) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 4,
        layers,
        ffn_dim: 32,
        type_vocab: 3,
        dropout: 0.0,
        use_type_token: type_token,
        ..ModelConfig::default()
    }
}

/// Shuffled item with two missing slots among the first eleven and a masked,
/// present last position.
fn item(rng: &mut Rng) -> MaskedItem {
    let mut props: Vec<usize> = (0..N_PROPS).collect();
    props.shuffle(rng);
    let mut it = MaskedItem {
        type_token: rng.random_range(0..3),
        props: props.try_into().unwrap(),
        values: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
        masked: [false; N_PROPS],
        missing: [false; N_PROPS],
        targets: [f64::NAN; N_PROPS],
    };
    let mut slots: Vec<usize> = (0..N_PROPS - 1).collect();
    slots.shuffle(rng);
    for &i in &slots[..2] {
        it.missing[i] = true;
        it.values[i] = 0.0;
    }
    it.masked[N_PROPS - 1] = true;
    it.targets[N_PROPS - 1] = it.values[N_PROPS - 1];
    it
}

fn rows(model: &Transformer<f64>, it: &MaskedItem) -> Vec<Vec<f64>> {
    let out = model.infer(&MaskedBatch::from_items(std::slice::from_ref(it)).unwrap()).unwrap();
    out.hidden.data().chunks(model.config().d_model).map(<[f64]>::to_vec).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn later_items_do_not_reach_earlier_rows() {
    let mut rng = seeded(1);
    for type_token in [true, false] {
        let model: Transformer<f64> = Transformer::new(config(3, type_token), &mut seeded(2)).unwrap();
        let off = model.config().offset();
        for _ in 0..20 {
            let it = item(&mut rng);
            let j = (1..N_PROPS - 1).rfind(|&i| !it.missing[i]).unwrap();
            let mut p = it.clone();
            p.values[j] += 1.5;
            let (a, b) = (rows(&model, &it), rows(&model, &p));
            for r in 0..off + j {
                assert!(max_diff(&a[r], &b[r]) <= 1e-12);
            }
            assert!(max_diff(&a[off + j], &b[off + j]) > 1e-6);
        }
    }
}

#[test]
fn missing_items_are_invisible_to_others() {
    let mut rng = seeded(3);
    let model: Transformer<f64> = Transformer::new(config(3, true), &mut seeded(4)).unwrap();
    for _ in 0..20 {
        let it = item(&mut rng);
        let miss: Vec<usize> = (0..N_PROPS).filter(|&i| it.missing[i]).collect();
        let mut p = it.clone();
        p.props.swap(miss[0], miss[1]);
        let (a, b) = (rows(&model, &it), rows(&model, &p));
        for i in (0..N_PROPS).filter(|&i| !it.missing[i]) {
            assert!(max_diff(&a[1 + i], &b[1 + i]) <= 1e-12);
        }
    }
}

fn shuffled_prefix(it: &MaskedItem, rng: &mut Rng) -> MaskedItem {
    let mut order: Vec<usize> = (0..N_PROPS - 1).collect();
    order.shuffle(rng);
    let mut p = it.clone();
    for (dst, &src) in order.iter().enumerate() {
        p.props[dst] = it.props[src];
        p.values[dst] = it.values[src];
        p.missing[dst] = it.missing[src];
        p.masked[dst] = it.masked[src];
        p.targets[dst] = it.targets[src];
    }
    p
}

#[test]
fn one_layer_last_row_ignores_prefix_order() {
    let mut rng = seeded(5);
    let model: Transformer<f64> = Transformer::new(config(1, true), &mut seeded(6)).unwrap();
    for _ in 0..20 {
        let it = item(&mut rng);
        let p = shuffled_prefix(&it, &mut rng);
        let (a, b) = (rows(&model, &it), rows(&model, &p));
        assert!(max_diff(a.last().unwrap(), b.last().unwrap()) <= 1e-10);
    }
}

#[test]
fn deeper_stacks_see_prefix_order() {
    let mut rng = seeded(7);
    let model: Transformer<f64> = Transformer::new(config(2, true), &mut seeded(8)).unwrap();
    let it = item(&mut rng);
    let p = shuffled_prefix(&it, &mut rng);
    let (a, b) = (rows(&model, &it), rows(&model, &p));
    assert!(max_diff(a.last().unwrap(), b.last().unwrap()) > 1e-8);
}
