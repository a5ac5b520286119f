use std::io::{self, Write};

/// A real rounded to 9 significant digits, printed in its shortest form.
pub fn num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn row<W: Write>(out: &mut W, fields: &[String]) -> io::Result<()> {
    writeln!(out, "{}", fields.join(","))
}

pub fn header<W: Write>(out: &mut W, names: &[&str]) -> io::Result<()> {
    writeln!(out, "{}", names.join(","))
}
