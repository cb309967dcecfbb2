use dtsg_wasm::{decode_segments, shortcut_summary, GroundingDemo};

#[test]
fn decode_ranks_the_peak_pair_first() {
    let mut start = vec![-4.0; 6];
    let mut end = vec![-4.0; 6];
    start[1] = 4.0;
    end[3] = 4.0;
    let segs = decode_segments(&start, &end, 3, 0, Some((1, 3))).unwrap();
    assert_eq!((segs[0].start, segs[0].end), (1, 3));
    assert_eq!(segs[0].iou, Some(1.0));
    assert!(segs.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn decode_respects_the_length_cap() {
    let segs = decode_segments(&[0.0; 8], &[0.0; 8], 100, 2, None).unwrap();
    assert!(segs.iter().all(|s| s.end - s.start < 2 && s.iou.is_none()));
    assert_eq!(segs.len(), 8 + 7);
}

#[test]
fn decode_rejects_mismatched_lengths() {
    assert!(decode_segments(&[0.0; 3], &[0.0; 4], 1, 0, None).is_err());
}

#[test]
fn shortcut_holds_in_train_and_breaks_in_test() {
    let s = shortcut_summary(1, 3.0, 0.9, 2).unwrap();
    assert_eq!(s.videos.len(), 4);
    assert!(s.train_shortcut_rate > 0.75, "{}", s.train_shortcut_rate);
    assert!(s.test_shortcut_rate < 0.4, "{}", s.test_shortcut_rate);
}

#[test]
fn trained_demo_exposes_attention_rows() {
    let demo = GroundingDemo::train_native(0, 2.0, 2).unwrap();
    let ins = demo.inspect_native(0).unwrap();
    assert_eq!(ins.attention.len(), 16);
    for row in &ins.attention {
        assert_eq!(row.len(), ins.query.len());
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(ins.top.len(), 3);
    assert!(demo.inspect_native(10_000).is_err());
}
