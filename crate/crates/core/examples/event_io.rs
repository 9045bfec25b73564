//! Writes a random event stream as CSV and as the packed binary format,
//! parses both back and shows that out-of-order input gets sorted.
//!
//! cargo run --release --example event_io -- [dir]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_fusion::events::{parse_events, read_csv, write_events, EventFormat, EventPoint, EventStream, Polarity};

fn main() -> safe_fusion::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let events: Vec<EventPoint> = (0..10_000)
        .map(|_| EventPoint {
            x: rng.random_range(0..346),
            y: rng.random_range(0..260),
            t: rng.random_range(0..1_000_000),
            p: if rng.random_bool(0.5) { Polarity::On } else { Polarity::Off },
        })
        .collect();
    let stream = EventStream::new((346, 260), events)?;

    for format in [EventFormat::Csv, EventFormat::Binary] {
        let path = dir.join(format!("events_demo.{}", format.extension()));
        write_events(&stream, &path, format)?;
        let back = parse_events(&path, format, stream.resolution())?;
        let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!("{:?}: {} events, {bytes} bytes, round trip identical: {}", format, back.len(), back == stream);
    }

    let sorted = read_csv("x,y,t,p\n3,4,100,1\n3,4,50,0\n", (8, 8))?;
    println!("out-of-order rows parse as {:?}", sorted.events());
    match read_csv("x,y,t,p\n3,4,100,1\n3,x,50,0\n", (8, 8)) {
        Err(e) => println!("malformed row: {e}"),
        Ok(_) => unreachable!(),
    }
    match read_csv("x,y,t,p\n9,4,100,1\n", (8, 8)) {
        Err(e) => println!("outside the sensor: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
