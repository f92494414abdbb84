use std::fmt::Display;

/// A header plus rows of pre-formatted cells, rendered as CSV or TSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Comma,
    Tab,
}

impl Delimiter {
    fn as_char(self) -> char {
        match self {
            Delimiter::Comma => ',',
            Delimiter::Tab => '\t',
        }
    }
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<D: Display>(&mut self, cells: impl IntoIterator<Item = D>) {
        let row: Vec<String> = cells.into_iter().map(|c| c.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn render(&self, delim: Delimiter) -> String {
        let d = delim.as_char().to_string();
        let mut out = self.header.join(&d);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(&d));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        self.render(Delimiter::Comma)
    }

    /// Parses CSV or TSV text with a one-line header (no quoting).
    pub fn parse(text: &str) -> Option<Table> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next()?;
        let delim = if head.contains('\t') { '\t' } else { ',' };
        let split = |l: &str| l.split(delim).map(|s| s.trim().to_string()).collect::<Vec<_>>();
        let header = split(head);
        let rows = lines.map(split).collect::<Vec<_>>();
        rows.iter().all(|r| r.len() == header.len()).then_some(Table { header, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_parse() {
        let mut t = Table::new(["a", "b"]);
        t.push([1, 2]);
        t.push([3, 4]);
        assert_eq!(t.to_csv(), "a,b\n1,2\n3,4\n");
        assert_eq!(t.render(Delimiter::Tab), "a\tb\n1\t2\n3\t4\n");
        assert_eq!(Table::parse(&t.render(Delimiter::Tab)).unwrap(), t);
        assert!(Table::parse("a,b\n1\n").is_none());
    }
}
