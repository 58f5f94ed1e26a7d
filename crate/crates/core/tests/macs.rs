use agfusion::attention::{attend, count_macs, AttentionMode, MhaParams};
use agfusion::macs::{self, MacCount};
use agfusion::rng::{self, Stream};
use agfusion::{BevMap, Modality, Tensor};

fn counted(h: usize, w: usize, window: usize, mode: AttentionMode) -> MacCount {
    let c = 4;
    let q = BevMap::new(Tensor::from_fn(&[h, w, c], |i| rng::uniform_at(1, i as u64)), Modality::Camera).unwrap();
    let kv = BevMap::new(Tensor::from_fn(&[h, w, c], |i| rng::uniform_at(2, i as u64)), Modality::Lidar).unwrap();
    let p = MhaParams::init(c, 2, &mut Stream::new(3));
    let (r, n) = macs::measure(|| attend(&q, &kv, &p, window, mode));
    r.unwrap();
    n
}

#[test]
fn counters_equal_closed_form() {
    for h in [8, 16, 32] {
        for w in [8, 16, 32] {
            for window in [4, 8] {
                for mode in [AttentionMode::Windowed, AttentionMode::Global] {
                    let want = count_macs(h, w, 4, window, 2, mode).unwrap();
                    assert_eq!(counted(h, w, window, mode), want, "{h}x{w} h={window} {mode:?}");
                }
            }
        }
    }
}

#[test]
fn closed_form_values() {
    // 8×8 map, 4×4 windows, 4 channels: 4 windows of 16 tokens.
    let win = count_macs(8, 8, 4, 4, 2, AttentionMode::Windowed).unwrap();
    assert_eq!(win.attention, 4 * 2 * 16 * 16 * 4);
    let glob = count_macs(8, 8, 4, 4, 2, AttentionMode::Global).unwrap();
    assert_eq!(glob.attention, 2 * 64 * 64 * 4);
    assert_eq!(win.projection, 4 * 64 * 16);
    assert_eq!(glob.projection, win.projection);
}

#[test]
fn doubling_the_map_scales_four_and_sixteen() {
    for window in [4, 8] {
        let small_w = counted(8, 8, window, AttentionMode::Windowed).attention;
        let big_w = counted(16, 16, window, AttentionMode::Windowed).attention;
        let small_g = counted(8, 8, window, AttentionMode::Global).attention;
        let big_g = counted(16, 16, window, AttentionMode::Global).attention;
        assert_eq!(big_w, 4 * small_w);
        assert_eq!(big_g, 16 * small_g);
    }
}

#[test]
fn full_window_equals_global() {
    assert_eq!(counted(8, 8, 8, AttentionMode::Windowed), counted(8, 8, 8, AttentionMode::Global));
    let a = count_macs(16, 16, 4, 16, 2, AttentionMode::Windowed).unwrap();
    assert_eq!(a, count_macs(16, 16, 4, 16, 2, AttentionMode::Global).unwrap());
}

#[test]
fn counters_are_per_thread() {
    let before = macs::snapshot();
    std::thread::spawn(|| counted(8, 8, 4, AttentionMode::Global)).join().unwrap();
    assert_eq!(macs::snapshot(), before);
}
