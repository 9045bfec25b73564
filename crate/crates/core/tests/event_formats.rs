//! Event file formats on disk: round trips, ordering and error reporting.

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_fusion::events::{
    parse_events, read_binary, read_csv, write_binary, write_csv, write_events, EventFormat, EventPoint, EventStream,
    Polarity,
};
use safe_fusion::Error;

fn random_stream(n: usize, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..n)
        .map(|_| EventPoint {
            x: rng.random_range(0..346),
            y: rng.random_range(0..260),
            t: rng.random_range(0..5_000_000),
            p: if rng.random_bool(0.5) { Polarity::On } else { Polarity::Off },
        })
        .collect();
    EventStream::new((346, 260), events).unwrap()
}

#[test]
fn ten_thousand_events_survive_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let stream = random_stream(10_000, 11);
    for format in [EventFormat::Csv, EventFormat::Binary] {
        let path = dir.path().join(format!("events.{}", format.extension()));
        write_events(&stream, &path, format).unwrap();
        let back = parse_events(&path, format, (346, 260)).unwrap();
        assert_eq!(back, stream, "{format:?}");
    }
}

#[test]
fn parsed_streams_are_sorted_by_time() {
    let stream = random_stream(2_000, 3);
    assert!(stream.events().windows(2).all(|w| w[0].t <= w[1].t));

    let mut lines = vec!["x,y,t,p".to_string()];
    for (i, t) in [50, 10, 30, 10, 0].iter().enumerate() {
        lines.push(format!("{i},0,{t},1"));
    }
    let parsed = read_csv(&lines.join("\n"), (8, 8)).unwrap();
    let order: Vec<(u16, i64)> = parsed.events().iter().map(|e| (e.x, e.t)).collect();
    // Ties keep file order.
    assert_eq!(order, vec![(4, 0), (1, 10), (3, 10), (2, 30), (0, 50)]);
}

#[test]
fn csv_errors_name_the_line() {
    let cases = [
        ("x,y,t,p\n1,2,3,1\n1,2,3\n", 3),
        ("x,y,t,p\n1,2,3,7\n", 2),
        ("x,y,t,p\n1,2,3,1\n1,2,3,1\n-1,2,3,1\n", 4),
        ("a,b,c,d\n", 1),
    ];
    for (text, line) in cases {
        match read_csv(text, (8, 8)) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, line, "{text:?}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn out_of_range_events_fail_validation() {
    assert!(matches!(read_csv("x,y,t,p\n8,0,0,1\n", (8, 8)), Err(Error::Validation(_))));
    assert!(matches!(read_csv("x,y,t,p\n0,8,0,1\n", (8, 8)), Err(Error::Validation(_))));
    assert!(matches!(read_csv("x,y,t,p\n0,0,-4,1\n", (8, 8)), Err(Error::Validation(_))));
}

#[test]
fn binary_corruption_is_reported() {
    let stream = random_stream(10, 5);
    let bytes = write_binary(&stream).unwrap();
    assert_eq!(read_binary(&bytes).unwrap(), stream);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_binary(&bad_magic), Err(Error::Parse { record: 0, .. })));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(read_binary(truncated), Err(Error::Parse { record: 10, .. })));

    let mut bad_polarity = bytes.clone();
    let last = bad_polarity.len() - 1;
    bad_polarity[last] = 9;
    assert!(matches!(read_binary(&bad_polarity), Err(Error::Parse { record: 10, .. })));
}

#[test]
fn binary_resolution_must_match_the_caller() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.evt");
    write_events(&random_stream(5, 1), &path, EventFormat::Binary).unwrap();
    assert!(parse_events(&path, EventFormat::Binary, (100, 100)).is_err());
}

#[test]
fn missing_event_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = parse_events(&dir.path().join("absent.csv"), EventFormat::Csv, (8, 8)).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn csv_text_is_stable() {
    let stream = EventStream::new(
        (4, 4),
        vec![
            EventPoint { x: 1, y: 2, t: 7, p: Polarity::On },
            EventPoint { x: 3, y: 0, t: 2, p: Polarity::Off },
        ],
    )
    .unwrap();
    assert_eq!(write_csv(&stream), "x,y,t,p\n3,0,2,0\n1,2,7,1\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    write_events(&stream, &path, EventFormat::Csv).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), write_csv(&stream));
}
