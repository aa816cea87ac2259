//! Parse an annotation stream, reduce it to 2.5 fps and cut 20-step windows.

use goalsar::dataset::{downsample, filter_pedestrians, parse_annotations, AnnotationSchema};
use goalsar::trajectory::{build_windows, normalize_window, T_OBS, T_PRED};

fn main() -> goalsar::Result<()> {
    let mut text = String::from("# frame agent x y label\n");
    for f in 0..120 {
        text += &format!("{} 1 {} {} Pedestrian\n", f * 12, f as f64 * 0.5, 10.0);
        text += &format!("{} 2 {} {} Biker\n", f * 12, 3.0, f as f64);
    }
    text += "garbage line\n";

    let parsed = parse_annotations(&text, &AnnotationSchema::default());
    println!("{} tracks, {} skipped lines", parsed.tracks.len(), parsed.skipped);

    let walkers = filter_pedestrians(&parsed.tracks, false);
    let slow = downsample(&walkers, 30.0, 2.5)?;
    println!("pedestrian track has {} samples after decimation", slow[0].len());

    let set = build_windows("demo", &slow, T_OBS, T_PRED, 1)?;
    println!("{} windows", set.windows.len());
    let n = normalize_window(&set.windows[0]);
    println!("offset {:?}, first future step {:?}", n.offset, n.future()[0]);
    Ok(())
}
