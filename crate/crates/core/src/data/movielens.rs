//! MovieLens-1M `::`-delimited files.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::io::Vocabulary;
use super::{binarize_labels, DataError, FieldSpec, Instance, Schema};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rating {
    pub user: u32,
    pub movie: u32,
    pub rating: u32,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct User {
    pub id: u32,
    pub gender: String,
    pub age: u32,
    pub occupation: u32,
    pub zip: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Movie {
    pub id: u32,
    pub title: String,
    pub year: u32,
    pub genres: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MovieLens {
    pub ratings: Vec<Rating>,
    pub users: Vec<User>,
    pub movies: Vec<Movie>,
}

/// The files are Latin-1; map bytes to chars one to one.
fn read_latin1(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn fields<'a>(file: &str, line: usize, text: &'a str, n: usize) -> Result<Vec<&'a str>, DataError> {
    let parts: Vec<&str> = text.split("::").collect();
    if parts.len() != n {
        return Err(DataError::Malformed {
            file: file.to_string(),
            line,
            reason: format!("expected {n} fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

fn num<T: std::str::FromStr>(file: &str, line: usize, s: &str, what: &str) -> Result<T, DataError> {
    s.trim().parse().map_err(|_| DataError::Malformed {
        file: file.to_string(),
        line,
        reason: format!("bad {what} {s:?}"),
    })
}

pub(crate) fn parse_rating_line(line: usize, text: &str) -> Result<Rating, DataError> {
    const F: &str = "ratings.dat";
    let p = fields(F, line, text, 4)?;
    Ok(Rating {
        user: num(F, line, p[0], "user id")?,
        movie: num(F, line, p[1], "movie id")?,
        rating: num(F, line, p[2], "rating")?,
        timestamp: num(F, line, p[3], "timestamp")?,
    })
}

pub(crate) fn parse_user_line(line: usize, text: &str) -> Result<User, DataError> {
    const F: &str = "users.dat";
    let p = fields(F, line, text, 5)?;
    Ok(User {
        id: num(F, line, p[0], "user id")?,
        gender: p[1].to_string(),
        age: num(F, line, p[2], "age")?,
        occupation: num(F, line, p[3], "occupation")?,
        zip: p[4].to_string(),
    })
}

pub(crate) fn parse_movie_line(line: usize, text: &str) -> Result<Movie, DataError> {
    const F: &str = "movies.dat";
    let p = fields(F, line, text, 3)?;
    let title = p[1].trim();
    let year = title
        .strip_suffix(')')
        .and_then(|t| t.rsplit_once('('))
        .and_then(|(_, y)| y.parse::<u32>().ok().filter(|_| y.len() == 4))
        .ok_or_else(|| DataError::Malformed {
            file: F.to_string(),
            line,
            reason: format!("no trailing (YYYY) in title {title:?}"),
        })?;
    let genres = p[2].split('|').filter(|g| !g.is_empty()).map(str::to_string).collect();
    Ok(Movie { id: num(F, line, p[0], "movie id")?, title: title.to_string(), year, genres })
}

fn parse_file<R>(dir: &Path, name: &str, parse: impl Fn(usize, &str) -> Result<R, DataError>) -> Result<Vec<R>, DataError> {
    let text = read_latin1(&dir.join(name))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse(i + 1, l.trim_end_matches('\r')))
        .collect()
}

/// Read `ratings.dat`, `users.dat` and `movies.dat` from `dir`.
pub fn parse_movielens(dir: &Path) -> Result<MovieLens, DataError> {
    for f in ["ratings.dat", "users.dat", "movies.dat"] {
        if !dir.join(f).exists() {
            return Err(DataError::MissingFile(dir.join(f)));
        }
    }
    Ok(MovieLens {
        users: parse_file(dir, "users.dat", parse_user_line)?,
        movies: parse_file(dir, "movies.dat", parse_movie_line)?,
        ratings: parse_file(dir, "ratings.dat", parse_rating_line)?,
    })
}

fn year_bucket(year: u32) -> String {
    (year - year % 5).to_string()
}

fn genre_count_bucket(n: usize) -> String {
    match n {
        0 | 1 => "1".into(),
        2 => "2".into(),
        _ => "3+".into(),
    }
}

/// Six four-hour buckets of the UTC hour of day.
pub(crate) fn hour_bucket(ts: i64) -> String {
    (ts.rem_euclid(86_400) / 3600 / 4).to_string()
}

const USER_FIELDS: [&str; 3] = ["user.gender", "user.age", "user.occupation"];
const ITEM_FIELDS: [&str; 3] = ["item.year", "item.genre", "item.genre_count"];
const CONTEXT_FIELDS: [&str; 1] = ["ctx.hour"];

fn user_raw(u: &User) -> [String; 3] {
    [u.gender.clone(), u.age.to_string(), u.occupation.to_string()]
}

fn movie_raw(m: &Movie) -> [String; 3] {
    let primary = m.genres.first().cloned().unwrap_or_else(|| "(none)".into());
    [year_bucket(m.year), primary, genre_count_bucket(m.genres.len())]
}

/// Encode ratings as instances. Vocabularies cover every user and movie in the
/// side files, so attribute codes never hit the OOV bucket here.
pub fn featurize_movielens(ml: &MovieLens) -> Result<(Vec<Instance>, Schema, Vocabulary), DataError> {
    let users: HashMap<u32, [String; 3]> = ml.users.iter().map(|u| (u.id, user_raw(u))).collect();
    let movies: HashMap<u32, [String; 3]> = ml.movies.iter().map(|m| (m.id, movie_raw(m))).collect();

    let mut values: Vec<BTreeSet<String>> = vec![BTreeSet::new(); 7];
    for raw in users.values() {
        for (f, v) in raw.iter().enumerate() {
            values[f].insert(v.clone());
        }
    }
    for raw in movies.values() {
        for (f, v) in raw.iter().enumerate() {
            values[3 + f].insert(v.clone());
        }
    }
    for r in &ml.ratings {
        values[6].insert(hour_bucket(r.timestamp));
    }
    let names = USER_FIELDS.iter().chain(&ITEM_FIELDS).chain(&CONTEXT_FIELDS);
    let vocab = Vocabulary::from_fields(names.zip(values).map(|(n, v)| (n.to_string(), v.into_iter().collect())).collect());

    let code = |f: usize, v: &str| vocab.code(f, v);
    let mut instances = Vec::with_capacity(ml.ratings.len());
    for r in &ml.ratings {
        let u = users.get(&r.user).ok_or(DataError::UnknownEntity { kind: "user", id: r.user })?;
        let m = movies.get(&r.movie).ok_or(DataError::UnknownEntity { kind: "movie", id: r.movie })?;
        instances.push(Instance {
            user_id: r.user,
            item_id: r.movie,
            user_attrs: (0..3).map(|f| code(f, &u[f])).collect(),
            item_attrs: (0..3).map(|f| code(3 + f, &m[f])).collect(),
            context: vec![code(6, &hour_bucket(r.timestamp))],
            label: binarize_labels(r.rating)?,
            timestamp: r.timestamp,
        });
    }
    let card = |f: usize| vocab.cardinality(f);
    let spec = |range: std::ops::Range<usize>| {
        range.map(|f| FieldSpec { name: vocab.field_name(f).to_string(), cardinality: card(f) }).collect()
    };
    let schema = Schema { user_attrs: spec(0..3), item_attrs: spec(3..6), context: spec(6..7) };
    Ok((instances, schema, vocab))
}
