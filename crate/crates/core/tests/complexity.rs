use docsegtr_core::attention::{
    attention_score_count, full_attention, twin_attention, AttentionMode, AttentionParams,
    AttnStats, TwinAttentionParams,
};
use docsegtr_core::params::{Init, ParamStore};
use docsegtr_core::Graph;

const SIDES: [usize; 8] = [1, 2, 3, 5, 8, 16, 32, 64];

fn measure(h: usize, w: usize, store: &ParamStore, x: &docsegtr_core::Tensor) -> (u64, u64) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut twin = AttnStats::default();
    twin_attention(
        &mut g,
        xv,
        &TwinAttentionParams::bind(&p, "twin", 1).unwrap(),
        &mut twin,
    )
    .unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut full = AttnStats::default();
    full_attention(
        &mut g,
        xv,
        &AttentionParams::bind(&p, "full", 1).unwrap(),
        &mut full,
    )
    .unwrap();
    assert_eq!(x.shape(), [h, w, 2]);
    (full.score_entries, twin.score_entries)
}

#[test]
fn instrumented_counts_equal_closed_forms() {
    let mut store = ParamStore::new();
    let mut init = Init::new(1);
    AttentionParams::declare(&mut store, "full", 2, &mut init);
    TwinAttentionParams::declare(&mut store, "twin", 2, &mut init);
    for h in SIDES {
        for w in SIDES {
            let x = init.uniform(&[h, w, 2], 1.0);
            let (full, twin) = measure(h, w, &store, &x);
            let (hu, wu) = (h as u64, w as u64);
            assert_eq!(full, (hu * wu) * (hu * wu), "{h}×{w}");
            assert_eq!(twin, hu * wu * wu + wu * hu * hu, "{h}×{w}");
            assert_eq!(full, attention_score_count(hu, wu, AttentionMode::Full));
            assert_eq!(twin, attention_score_count(hu, wu, AttentionMode::Twin));
        }
    }
}

#[test]
fn ratio_fixtures() {
    let ratio = |h, w| {
        attention_score_count(h, w, AttentionMode::Full) as f64
            / attention_score_count(h, w, AttentionMode::Twin) as f64
    };
    assert_eq!(format!("{:.2}", ratio(32, 32)), "16.00");
    assert_eq!(attention_score_count(2, 8, AttentionMode::Full), 256);
    assert_eq!(attention_score_count(2, 8, AttentionMode::Twin), 160);
}
