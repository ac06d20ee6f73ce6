#include <cstring>

#include <png.h>

#include "mitdet/data.hpp"
#include "mitdet/error.hpp"

namespace mitdet {

RgbImage read_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw Error(ErrorKind::kMissingFile, "cannot read PNG " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(image.height), static_cast<int>(image.width), 3);
  if (!png_image_finish_read(&image, nullptr, out.data().data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorKind::kIo, "cannot decode PNG " + path + ": " + image.message);
  }
  return out;
}

void write_png(const RgbImage& img, const std::string& path) {
  if (img.channels() != 3) throw Error(ErrorKind::kInvalidArgument, "PNG writer expects RGB");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.data().data(), 0, nullptr)) {
    throw Error(ErrorKind::kIo, "cannot write PNG " + path + ": " + image.message);
  }
}

}  // namespace mitdet
