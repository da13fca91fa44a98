use speq::C64;
use speq_cli::{parse_complex, Settings};

#[test]
fn complex_forms() {
    let cases = [
        ("-1", C64::new(-1.0, 0.0)),
        ("0.5+1i", C64::new(0.5, 1.0)),
        ("0.5-2i", C64::new(0.5, -2.0)),
        ("-1e-3+2.5e1i", C64::new(-1e-3, 25.0)),
        ("2i", C64::new(0.0, 2.0)),
        ("i", C64::new(0.0, 1.0)),
        ("-i", C64::new(0.0, -1.0)),
        ("1 + i", C64::new(1.0, 1.0)),
        ("0.3,0.7", C64::new(0.3, 0.7)),
    ];
    for (text, expected) in cases {
        assert_eq!(parse_complex(text).unwrap(), expected, "{text}");
    }
    for bad in ["", "abc", "1+xi", "1,2,3"] {
        assert!(parse_complex(bad).is_err(), "{bad}");
    }
}

#[test]
fn config_overrides_flags() {
    let mut s = Settings::new(&["gamma", "z"]);
    s.flag("gamma", Some(2.0));
    s.flag("z", None::<&str>);
    s.apply_config("z = -1\nseed = 3\n").unwrap();
    assert_eq!(s.require::<f64>("gamma").unwrap(), 2.0);
    assert_eq!(s.raw("z"), Some("-1"));
    assert_eq!(s.get_or("seed", 0_u64).unwrap(), 3);
    s.apply_config("gamma = 0.5\n").unwrap();
    assert_eq!(s.require::<f64>("gamma").unwrap(), 0.5);
    assert!(s.apply_config("p = 4\n").is_err());
    assert!(s.require::<f64>("missing").is_err());
    assert!(s.get::<usize>("z").is_err());
}
