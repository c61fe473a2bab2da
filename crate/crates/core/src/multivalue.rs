//! `|`-separated value lists inside a single CSV cell. A literal `|` or `\`
//! is written with a preceding backslash; any other backslash is kept as is.

pub fn split(cell: &str) -> Vec<String> {
    if cell.is_empty() {
        return Vec::new();
    }
    let mut out = vec![String::new()];
    let mut chars = cell.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.clone().next() {
                Some(next @ ('|' | '\\')) => {
                    chars.next();
                    out.last_mut().unwrap().push(next);
                }
                _ => out.last_mut().unwrap().push('\\'),
            },
            '|' => out.push(String::new()),
            c => out.last_mut().unwrap().push(c),
        }
    }
    out
}

pub fn join<S: AsRef<str>>(values: &[S]) -> String {
    values
        .iter()
        .map(|v| v.as_ref().replace('\\', "\\\\").replace('|', "\\|"))
        .collect::<Vec<_>>()
        .join("|")
}
