// Score candidate fusions of one pair with the seven quality metrics.

use sgdfuse::datamodel::{Image, ValueRange};
use sgdfuse::metrics::{evaluate_images, Metric, MetricParams, MetricReport};
use sgdfuse::synthetic::{synthetic_pair, SyntheticSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let pair = synthetic_pair("scene", &SyntheticSpec::default(), 4)?;
    let (h, w) = pair.dims();
    let candidates = [
        ("visible", pair.vis.clone()),
        ("infrared", pair.ir.broadcast_rgb()),
        (
            "average",
            Image::from_fn(h, w, 3, ValueRange::Unit, |(y, x, c)| {
                0.5 * (pair.ir.get(y, x, 0) + pair.vis.get(y, x, c))
            })?,
        ),
        ("flat", Image::filled(h, w, 3, 0.5)?),
    ];
    let params = MetricParams::default();
    let mut rows = Vec::new();
    for (name, img) in &candidates {
        let (v, warnings) = evaluate_images(img, &pair, &params)?;
        for w in warnings {
            println!("{name}: {w}");
        }
        rows.push((name.to_string(), v));
    }
    let report = MetricReport::from_rows(rows);
    print!("{}", report.to_csv());
    let flat = &report.rows.iter().find(|(id, _)| id == "flat").expect("flat row").1;
    assert_eq!(flat.get(Metric::En), 0.0);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
